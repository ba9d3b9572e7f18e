//! Spline bases: natural cubic splines for time trends, cubic B-splines for
//! baseline hazards and quadratic I-splines (integrated quadratic M-splines)
//! for monotone links.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplineKind {
    NaturalCubic,
    CubicBSpline,
    QuadraticISpline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SplineBasisDef", into = "SplineBasisDef")]
pub struct SplineBasis {
    kind: SplineKind,
    interior: Vec<f64>,
    boundary: (f64, f64),
    /// Extended knot sequence for the B-spline based kinds.
    knots: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SplineBasisDef {
    kind: SplineKind,
    interior: Vec<f64>,
    boundary: (f64, f64),
}

impl TryFrom<SplineBasisDef> for SplineBasis {
    type Error = Error;

    fn try_from(d: SplineBasisDef) -> Result<Self> {
        SplineBasis::new(d.kind, d.boundary, d.interior)
    }
}

impl From<SplineBasis> for SplineBasisDef {
    fn from(b: SplineBasis) -> Self {
        SplineBasisDef {
            kind: b.kind,
            interior: b.interior,
            boundary: b.boundary,
        }
    }
}

impl SplineBasis {
    pub fn new(kind: SplineKind, boundary: (f64, f64), interior: Vec<f64>) -> Result<Self> {
        let (a, b) = boundary;
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::domain(format!("invalid boundary knots ({a}, {b})")));
        }
        let mut prev = a;
        for &k in &interior {
            if !(k > prev) {
                return Err(Error::domain(format!(
                    "interior knots must be strictly increasing inside ({a}, {b})"
                )));
            }
            prev = k;
        }
        if let Some(&last) = interior.last() {
            if !(last < b) {
                return Err(Error::domain(format!("interior knot {last} not below boundary {b}")));
            }
        }
        let order = match kind {
            SplineKind::NaturalCubic => 0,
            SplineKind::CubicBSpline => 4,
            SplineKind::QuadraticISpline => 4,
        };
        let knots = if order == 0 {
            Vec::new()
        } else {
            extended_knots(a, b, &interior, order)
        };
        Ok(SplineBasis {
            kind,
            interior,
            boundary,
            knots,
        })
    }

    pub fn natural_cubic(boundary: (f64, f64), interior: Vec<f64>) -> Result<Self> {
        Self::new(SplineKind::NaturalCubic, boundary, interior)
    }

    pub fn cubic_bspline(boundary: (f64, f64), interior: Vec<f64>) -> Result<Self> {
        Self::new(SplineKind::CubicBSpline, boundary, interior)
    }

    pub fn quadratic_ispline(boundary: (f64, f64), interior: Vec<f64>) -> Result<Self> {
        Self::new(SplineKind::QuadraticISpline, boundary, interior)
    }

    pub fn kind(&self) -> SplineKind {
        self.kind
    }

    pub fn boundary(&self) -> (f64, f64) {
        self.boundary
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    /// Number of basis functions.
    ///
    /// The natural cubic basis carries no intercept column.
    pub fn len(&self) -> usize {
        let n = self.interior.len();
        match self.kind {
            SplineKind::NaturalCubic => n + 1,
            SplineKind::CubicBSpline => n + 4,
            SplineKind::QuadraticISpline => n + 3,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(t, &mut out);
        out
    }

    /// Evaluate the basis at `t` into `out` (length [`len`](Self::len)).
    ///
    /// Natural cubic splines extrapolate linearly; the other kinds clamp `t`
    /// to the boundary knots.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len());
        match self.kind {
            SplineKind::NaturalCubic => self.natural_into(t, out),
            SplineKind::CubicBSpline => {
                let t = t.clamp(self.boundary.0, self.boundary.1);
                bspline_values(&self.knots, 4, t, out);
            }
            SplineKind::QuadraticISpline => {
                let t = t.clamp(self.boundary.0, self.boundary.1);
                let mut cubic = vec![0.0; self.len() + 1];
                bspline_values(&self.knots, 4, t, &mut cubic);
                // I_j = sum_{i >= j} B4_i for j = 1..=n+3
                let mut acc = 0.0;
                for j in (1..cubic.len()).rev() {
                    acc += cubic[j];
                    out[j - 1] = acc.min(1.0);
                }
            }
        }
    }

    /// First derivative of every basis function at `t`.
    ///
    /// For I-splines this is the normalized quadratic M-spline basis.
    pub fn derivative(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        match self.kind {
            SplineKind::NaturalCubic => {
                let (a, b) = self.boundary;
                let scale = 1.0 / (b - a);
                let x = (t - a) * scale;
                let knots = self.scaled_knots();
                let kk = knots.len();
                out[0] = scale;
                let dprime = |k: usize| {
                    let xi = knots[k];
                    let last = knots[kk - 1];
                    (3.0 * pos(x - xi).powi(2) - 3.0 * pos(x - last).powi(2)) / (last - xi)
                };
                let tail = dprime(kk - 2);
                for k in 0..kk.saturating_sub(2) {
                    out[k + 1] = (dprime(k) - tail) * scale;
                }
            }
            SplineKind::CubicBSpline => {
                let t = t.clamp(self.boundary.0, self.boundary.1);
                let mut quad = vec![0.0; self.len() - 1];
                let inner = &self.knots[1..self.knots.len() - 1];
                bspline_values(inner, 3, t, &mut quad);
                for i in 0..self.len() {
                    let left = if i >= 1 {
                        let den = self.knots[i + 3] - self.knots[i];
                        if den > 0.0 {
                            quad[i - 1] / den
                        } else {
                            0.0
                        }
                    } else {
                        0.0
                    };
                    let right = if i < self.len() - 1 {
                        let den = self.knots[i + 4] - self.knots[i + 1];
                        if den > 0.0 {
                            quad[i] / den
                        } else {
                            0.0
                        }
                    } else {
                        0.0
                    };
                    out[i] = 3.0 * (left - right);
                }
            }
            SplineKind::QuadraticISpline => {
                let t = t.clamp(self.boundary.0, self.boundary.1);
                let inner = &self.knots[1..self.knots.len() - 1];
                bspline_values(inner, 3, t, &mut out);
                for (j, v) in out.iter_mut().enumerate() {
                    let den = inner[j + 3] - inner[j];
                    *v *= 3.0 / den;
                }
            }
        }
        out
    }

    fn scaled_knots(&self) -> Vec<f64> {
        let (a, b) = self.boundary;
        let mut k = Vec::with_capacity(self.interior.len() + 2);
        k.push(0.0);
        k.extend(self.interior.iter().map(|x| (x - a) / (b - a)));
        k.push(1.0);
        k
    }

    fn natural_into(&self, t: f64, out: &mut [f64]) {
        let (a, b) = self.boundary;
        let x = (t - a) / (b - a);
        let knots = self.scaled_knots();
        let kk = knots.len();
        let last = knots[kk - 1];
        let d = |k: usize| {
            let xi = knots[k];
            (pos(x - xi).powi(3) - pos(x - last).powi(3)) / (last - xi)
        };
        out[0] = x;
        let tail = d(kk - 2);
        for k in 0..kk - 2 {
            out[k + 1] = d(k) - tail;
        }
    }
}

#[inline]
fn pos(x: f64) -> f64 {
    x.max(0.0)
}

fn extended_knots(a: f64, b: f64, interior: &[f64], order: usize) -> Vec<f64> {
    let mut k = vec![a; order];
    k.extend_from_slice(interior);
    k.extend(std::iter::repeat(b).take(order));
    k
}

/// All B-spline basis values of the given order at `t` (Cox-de Boor).
///
/// `out` has `knots.len() - order` entries. At the right boundary the last
/// non-degenerate span is used, so the basis still sums to one there.
pub fn bspline_values(knots: &[f64], order: usize, t: f64, out: &mut [f64]) {
    let n = knots.len() - order;
    debug_assert_eq!(out.len(), n);
    out.iter_mut().for_each(|v| *v = 0.0);
    let p = order - 1;
    // span index i with knots[i] <= t < knots[i+1], p <= i < n
    let mut span = p;
    for i in p..n {
        if knots[i] <= t && knots[i] < knots[i + 1] {
            span = i;
        }
    }
    let mut left = vec![0.0; order];
    let mut right = vec![0.0; order];
    let mut basis = vec![0.0; order];
    basis[0] = 1.0;
    for j in 1..=p {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let den = right[r + 1] + left[j - r];
            let temp = if den != 0.0 { basis[r] / den } else { 0.0 };
            basis[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        basis[j] = saved;
    }
    for (r, v) in basis.iter().enumerate() {
        out[span - p + r] = *v;
    }
}
