//! Measurement models linking observed outcomes to the latent process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::splines::{SplineBasis, SplineKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OutcomeSpec {
    /// Cumulative probit with levels `0..=max_level`.
    Ordinal { name: String, max_level: u32 },
    /// Continuous outcome with `H(y) = latent + N(0, sd^2)` for a monotone `H`.
    Curvilinear { name: String, link: LinkSpec },
}

impl OutcomeSpec {
    pub fn name(&self) -> &str {
        match self {
            OutcomeSpec::Ordinal { name, .. } | OutcomeSpec::Curvilinear { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LinkSpec {
    /// `H(y) = c0 + c1^2 (y - lo) / (hi - lo)`.
    Linear { range: (f64, f64) },
    /// `H(y) = c0 + sum_j c_j^2 I_j(y)` over quadratic I-splines.
    ISpline { basis: SplineBasis },
}

impl LinkSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LinkSpec::Linear { range } => {
                if !(range.0 < range.1) {
                    return Err(Error::domain("linear link range must be increasing"));
                }
            }
            LinkSpec::ISpline { basis } => {
                if basis.kind() != SplineKind::QuadraticISpline {
                    return Err(Error::domain("link basis must be a quadratic I-spline"));
                }
            }
        }
        Ok(())
    }

    pub fn range(&self) -> (f64, f64) {
        match self {
            LinkSpec::Linear { range } => *range,
            LinkSpec::ISpline { basis } => basis.boundary(),
        }
    }

    /// Number of squared link coefficients (excluding the intercept).
    pub fn len(&self) -> usize {
        match self {
            LinkSpec::Linear { .. } => 1,
            LinkSpec::ISpline { basis } => basis.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Integrated basis `I_j(y)` and its derivative `M_j(y)`.
    pub fn basis(&self, y: f64) -> (Vec<f64>, Vec<f64>) {
        match self {
            LinkSpec::Linear { range } => {
                let w = range.1 - range.0;
                let y = y.clamp(range.0, range.1);
                (vec![(y - range.0) / w], vec![1.0 / w])
            }
            LinkSpec::ISpline { basis } => (basis.eval(y), basis.derivative(y)),
        }
    }
}

/// Link `H` evaluated with raw coefficients `(c0, c_1, ..)`.
pub fn link_value(link: &LinkSpec, raw: &[f64], y: f64) -> f64 {
    let (i, _) = link.basis(y);
    raw[0] + i.iter().zip(&raw[1..]).map(|(b, c)| c * c * b).sum::<f64>()
}

/// Inverse of the link by bisection, clamped to the link range.
pub fn link_inverse(link: &LinkSpec, raw: &[f64], h: f64) -> (f64, bool) {
    let (lo, hi) = link.range();
    if h <= link_value(link, raw, lo) {
        return (lo, true);
    }
    if h >= link_value(link, raw, hi) {
        return (hi, true);
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if link_value(link, raw, m) < h {
            a = m;
        } else {
            b = m;
        }
    }
    (0.5 * (a + b), false)
}

/// Ordered thresholds from `(d_1, s_2, .., s_M)`: `d_m = d_1 + sum_{j<m} s_j^2`.
pub fn thresholds_from_raw(raw: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    let mut acc = raw[0];
    out.push(acc);
    for s in &raw[1..] {
        acc += s * s;
        out.push(acc);
    }
    out
}

/// Inverse of `thresholds_from_raw` choosing nonnegative increments.
pub fn thresholds_to_raw(delta: &[f64]) -> Result<Vec<f64>> {
    if delta.is_empty() {
        return Err(Error::domain("at least one threshold is required"));
    }
    let mut out = vec![delta[0]];
    for w in delta.windows(2) {
        let d = w[1] - w[0];
        if !(d >= 0.0) {
            return Err(Error::domain("thresholds must be nondecreasing"));
        }
        out.push(d.sqrt());
    }
    Ok(out)
}
