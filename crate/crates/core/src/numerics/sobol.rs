//! Sobol low-discrepancy points mapped to standard normal space.
//!
//! Direction numbers are the first 16 dimensions of the Joe-Kuo
//! `new-joe-kuo-6.21201` table, vendored so point sets are identical on every
//! platform.

use crate::error::{Error, Result};
use crate::numerics::normal::normal_quantile;

pub const MAX_DIM: usize = 16;
const BITS: usize = 32;

/// (degree s, polynomial coefficients a, initial direction numbers m_1..m_s)
const DIRECTIONS: [(u32, u32, &[u32]); MAX_DIM - 1] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
];

fn direction_vectors(dim: usize) -> Vec<[u32; BITS]> {
    let mut out = Vec::with_capacity(dim);
    let mut first = [0u32; BITS];
    for (i, v) in first.iter_mut().enumerate() {
        *v = 1u32 << (BITS - 1 - i);
    }
    out.push(first);
    for &(s, a, m) in DIRECTIONS.iter().take(dim.saturating_sub(1)) {
        let s = s as usize;
        let mut v = [0u32; BITS];
        for i in 0..BITS {
            if i < s {
                v[i] = m[i] << (BITS - 1 - i);
            } else {
                let mut x = v[i - s] ^ (v[i - s] >> s);
                for k in 1..s {
                    if (a >> (s - 1 - k)) & 1 == 1 {
                        x ^= v[i - k];
                    }
                }
                v[i] = x;
            }
        }
        out.push(v);
    }
    out
}

/// Uniform Sobol points in `(0, 1)^dim`, skipping the initial all-zero point.
pub fn sobol_uniform(dim: usize, count: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim > MAX_DIM {
        return Err(Error::domain(format!(
            "Sobol dimension {dim} outside the vendored range 1..={MAX_DIM}"
        )));
    }
    if count == 0 {
        return Err(Error::domain("Sobol point count must be positive"));
    }
    let v = direction_vectors(dim);
    let mut state = vec![0u32; dim];
    let mut out = Vec::with_capacity(dim * count);
    let scale = 1.0 / (1u64 << BITS) as f64;
    // Gray-code order; index n uses the lowest zero bit of n - 1.
    for n in 1..=count as u64 {
        let c = (!(n - 1)).trailing_zeros() as usize;
        for (j, x) in state.iter_mut().enumerate() {
            *x ^= v[j][c.min(BITS - 1)];
        }
        out.extend(state.iter().map(|&x| x as f64 * scale));
    }
    Ok(out)
}

/// A fixed set of points in standard normal space, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalPoints {
    dim: usize,
    values: Vec<f64>,
}

impl NormalPoints {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.values.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim.max(1))
    }
}

/// Sobol points mapped through the inverse normal CDF.
pub fn sobol_normal(dim: usize, count: usize) -> Result<NormalPoints> {
    let values = sobol_uniform(dim, count)?
        .into_iter()
        .map(normal_quantile)
        .collect();
    Ok(NormalPoints { dim, values })
}

/// Sobol points including the origin, each coordinate shifted by half the
/// finest dyadic cell of the enclosing `2^m >= count` net. For `count = 2^m`
/// every point sits at the centre of its elementary cell, so one dimension
/// reduces to the midpoint rule in probability space. Used for likelihood
/// integration, where the skipped origin would bias the average by `1/count`.
pub fn sobol_normal_centered(dim: usize, count: usize) -> Result<NormalPoints> {
    if count == 0 {
        return Err(Error::domain("Sobol point count must be positive"));
    }
    let m = count.next_power_of_two().trailing_zeros();
    let shift = 0.5f64.powi(m as i32 + 1);
    let mut u = vec![0.0; dim];
    if count > 1 {
        u.extend(sobol_uniform(dim, count - 1)?);
    } else if dim == 0 || dim > MAX_DIM {
        return Err(Error::domain(format!(
            "Sobol dimension {dim} outside the vendored range 1..={MAX_DIM}"
        )));
    }
    let values = u.into_iter().map(|x| normal_quantile((x + shift).fract())).collect();
    Ok(NormalPoints { dim, values })
}
