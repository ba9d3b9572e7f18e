//! Two-step polychoric correlations: thresholds from the marginals, then a
//! one-dimensional likelihood maximization over the bivariate normal cells.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::ReplicateSample;
use crate::data::ScaleDefinition;
use crate::error::{Error, Result};
use crate::numerics::normal::{bivariate_normal_cdf, normal_quantile};
use crate::numerics::roots::brent_maximize;

/// Search range for the correlation.
pub const RHO_BOUND: f64 = 0.9999;
const SCAN_STEP: f64 = 0.05;
const CELL_FLOOR: f64 = 1e-300;

/// Normal thresholds of the observed categories, from cumulative frequencies.
/// Empty categories are skipped; `counts` must have at least two nonzero cells.
pub fn marginal_thresholds(counts: &[usize]) -> Vec<f64> {
    let n: usize = counts.iter().sum();
    let mut cum = 0usize;
    let mut out = Vec::new();
    let observed: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    for c in &observed[..observed.len().saturating_sub(1)] {
        cum += c;
        out.push(normal_quantile(cum as f64 / n as f64));
    }
    out
}

fn cut(t: &[f64], j: usize) -> f64 {
    // category j spans (t[j-1], t[j]]
    if j == 0 {
        f64::NEG_INFINITY
    } else {
        t[j - 1]
    }
}

fn upper(t: &[f64], j: usize) -> f64 {
    t.get(j).copied().unwrap_or(f64::INFINITY)
}

/// Log-likelihood of `rho` for a table over observed categories with the given
/// thresholds.
pub fn polychoric_loglik(table: &[Vec<usize>], tau_row: &[f64], tau_col: &[f64], rho: f64) -> f64 {
    let mut ll = 0.0;
    for (i, row) in table.iter().enumerate() {
        let (a0, a1) = (cut(tau_row, i), upper(tau_row, i));
        for (j, &n) in row.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let (b0, b1) = (cut(tau_col, j), upper(tau_col, j));
            let p = bivariate_normal_cdf(a1, b1, rho) - bivariate_normal_cdf(a0, b1, rho) - bivariate_normal_cdf(a1, b0, rho)
                + bivariate_normal_cdf(a0, b0, rho);
            ll += n as f64 * p.max(CELL_FLOOR).ln();
        }
    }
    ll
}

/// Maximum-likelihood correlation given thresholds: a coarse scan followed by
/// Brent's search around the best scan point.
pub fn polychoric_with_thresholds(table: &[Vec<usize>], tau_row: &[f64], tau_col: &[f64]) -> f64 {
    let f = |r: f64| polychoric_loglik(table, tau_row, tau_col, r);
    let n_scan = (2.0 * RHO_BOUND / SCAN_STEP).ceil() as usize;
    let grid: Vec<f64> = (0..=n_scan).map(|k| (-RHO_BOUND + k as f64 * SCAN_STEP).min(RHO_BOUND)).collect();
    let vals: Vec<f64> = grid.iter().map(|&r| f(r)).collect();
    let best = (0..grid.len()).fold(0, |b, k| if vals[k] > vals[b] { k } else { b });
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(grid.len() - 1)];
    let (x, v) = brent_maximize(f, lo, hi, 1e-10);
    if v >= vals[best] {
        x
    } else {
        grid[best]
    }
}

/// Two-step estimate for a contingency table, thresholds from its own margins.
/// Rows and columns are item levels.
pub fn polychoric_pair(table: &[Vec<usize>]) -> Result<f64> {
    let rows: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let ncol = table.first().map_or(0, |r| r.len());
    if table.iter().any(|r| r.len() != ncol) {
        return Err(Error::validation("contingency table rows differ in length"));
    }
    let cols: Vec<usize> = (0..ncol).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    if rows.iter().filter(|&&c| c > 0).count() < 2 || cols.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::validation("each variable needs two observed levels"));
    }
    let compact: Vec<Vec<usize>> = table
        .iter()
        .zip(&rows)
        .filter(|(_, &r)| r > 0)
        .map(|(row, _)| row.iter().zip(&cols).filter(|(_, &c)| c > 0).map(|(v, _)| *v).collect())
        .collect();
    Ok(polychoric_with_thresholds(&compact, &marginal_thresholds(&rows), &marginal_thresholds(&cols)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolychoricMatrix {
    pub items: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    /// Number of sampled visits.
    pub n: usize,
    /// Items with fewer than two observed levels.
    pub excluded: Vec<String>,
    pub smoothed: bool,
    pub warnings: Vec<String>,
}

impl PolychoricMatrix {
    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        let p = self.items.len();
        DMatrix::from_fn(p, p, |i, j| self.matrix[i][j])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|i| i == id)
    }
}

/// Clip negative eigenvalues to zero and rescale to a unit diagonal. Returns
/// whether anything was clipped.
pub fn smooth_correlation(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return (m.clone(), false);
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let d: Vec<f64> = (0..r.nrows()).map(|i| r[(i, i)].max(f64::MIN_POSITIVE).sqrt()).collect();
    let out = DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| if i == j { 1.0 } else { r[(i, j)] / (d[i] * d[j]) });
    (out, true)
}

/// Pairwise polychoric matrix over all scale items of the sample. Items with a
/// single observed level are dropped with a warning.
pub fn polychoric_matrix(sample: &ReplicateSample, scale: &ScaleDefinition) -> Result<PolychoricMatrix> {
    let mut warnings = Vec::new();
    let mut excluded = Vec::new();
    let mut keep = Vec::new();
    let mut levels: Vec<Vec<usize>> = Vec::new();
    let mut taus = Vec::new();
    for (k, item) in scale.items.iter().enumerate() {
        let mut counts = vec![0usize; item.max_level as usize + 1];
        for row in &sample.responses {
            if let Some(l) = row[k] {
                counts[l as usize] += 1;
            }
        }
        if counts.iter().filter(|&&c| c > 0).count() < 2 {
            warnings.push(format!("item {} has fewer than two observed levels and is excluded", item.id));
            excluded.push(item.id.clone());
            continue;
        }
        // category index among observed levels
        let mut map = vec![usize::MAX; counts.len()];
        let mut j = 0;
        for (l, &c) in counts.iter().enumerate() {
            if c > 0 {
                map[l] = j;
                j += 1;
            }
        }
        taus.push(marginal_thresholds(&counts));
        levels.push(map);
        keep.push(k);
    }
    let p = keep.len();
    let mut m = DMatrix::identity(p, p);
    for a in 0..p {
        for b in a + 1..p {
            let (ka, kb) = (keep[a], keep[b]);
            let mut table = vec![vec![0usize; taus[b].len() + 1]; taus[a].len() + 1];
            let mut n = 0;
            for row in &sample.responses {
                if let (Some(x), Some(y)) = (row[ka], row[kb]) {
                    table[levels[a][x as usize]][levels[b][y as usize]] += 1;
                    n += 1;
                }
            }
            let rho = if n == 0 {
                warnings.push(format!(
                    "items {} and {} are never observed together; correlation set to 0",
                    scale.items[ka].id, scale.items[kb].id
                ));
                0.0
            } else {
                polychoric_with_thresholds(&table, &taus[a], &taus[b])
            };
            m[(a, b)] = rho;
            m[(b, a)] = rho;
        }
    }
    let (m, smoothed) = smooth_correlation(&m);
    if smoothed {
        warnings.push("polychoric matrix was not positive semidefinite; negative eigenvalues clipped".into());
    }
    Ok(PolychoricMatrix {
        items: keep.iter().map(|&k| scale.items[k].id.clone()).collect(),
        matrix: (0..p).map(|i| (0..p).map(|j| m[(i, j)]).collect()).collect(),
        n: sample.responses.len(),
        excluded,
        smoothed,
        warnings,
    })
}
