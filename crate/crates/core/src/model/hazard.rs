//! Baseline hazards of the cause-specific survival submodels.
//!
//! Every positive quantity is parameterized through squares so the optimizer
//! works on an unconstrained domain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::quadrature::gauss_legendre;
use crate::numerics::splines::SplineBasis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Baseline {
    /// `lambda0(t) = z1 z2 (z1 t)^(z2 - 1)` with `z1 = scale`, `z2 = shape`.
    Weibull,
    /// Constant rates between the given cut points (first interval starts at 0).
    PiecewiseConstant { cuts: Vec<f64> },
    /// Nonnegative combination of cubic B-splines on `boundary`; held constant
    /// beyond the upper boundary.
    CubicBSpline { interior: Vec<f64>, boundary: (f64, f64) },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum BaselineModel {
    Weibull,
    Piecewise { cuts: Vec<f64> },
    Spline { basis: SplineBasis },
}

impl BaselineModel {
    pub fn new(b: &Baseline) -> Result<Self> {
        Ok(match b {
            Baseline::Weibull => BaselineModel::Weibull,
            Baseline::PiecewiseConstant { cuts } => {
                let mut prev = 0.0;
                for &c in cuts {
                    if !(c > prev) || !c.is_finite() {
                        return Err(Error::domain("piecewise hazard cuts must be positive and increasing"));
                    }
                    prev = c;
                }
                BaselineModel::Piecewise { cuts: cuts.clone() }
            }
            Baseline::CubicBSpline { interior, boundary } => {
                if boundary.0 != 0.0 {
                    return Err(Error::domain("B-spline hazard basis must start at time 0"));
                }
                BaselineModel::Spline {
                    basis: SplineBasis::cubic_bspline(*boundary, interior.clone())?,
                }
            }
        })
    }

    pub fn n_params(&self) -> usize {
        match self {
            BaselineModel::Weibull => 2,
            BaselineModel::Piecewise { cuts } => cuts.len() + 1,
            BaselineModel::Spline { basis } => basis.len(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            BaselineModel::Weibull => vec!["sqrt_weibull_scale".into(), "sqrt_weibull_shape".into()],
            BaselineModel::Piecewise { .. } => (1..=self.n_params()).map(|j| format!("sqrt_rate{j}")).collect(),
            BaselineModel::Spline { .. } => (1..=self.n_params()).map(|j| format!("sqrt_spline{j}")).collect(),
        }
    }

    pub fn natural_names(&self) -> Vec<String> {
        match self {
            BaselineModel::Weibull => vec!["baseline risk Weibull scale".into(), "baseline risk Weibull shape".into()],
            BaselineModel::Piecewise { .. } => (1..=self.n_params()).map(|j| format!("baseline risk rate{j}")).collect(),
            BaselineModel::Spline { .. } => (1..=self.n_params()).map(|j| format!("baseline risk splines{j}")).collect(),
        }
    }

    /// Points where the hazard or its derivatives are discontinuous.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            BaselineModel::Weibull => vec![],
            BaselineModel::Piecewise { cuts } => cuts.clone(),
            BaselineModel::Spline { basis } => {
                let mut k = basis.interior().to_vec();
                k.push(basis.boundary().1);
                k
            }
        }
    }

    /// Whether `Lambda0(T) = sum_j theta_j^2 A_j(T)` with data-only `A_j`.
    pub fn is_linear_in_squares(&self) -> bool {
        !matches!(self, BaselineModel::Weibull)
    }

    /// `A_j(T) = int_0^T basis_j(t) dt` for the piecewise and spline kinds.
    pub fn basis_integrals(&self, t_end: f64) -> Vec<f64> {
        match self {
            BaselineModel::Weibull => vec![],
            BaselineModel::Piecewise { cuts } => {
                let mut out = Vec::with_capacity(cuts.len() + 1);
                let mut lo = 0.0;
                for hi in cuts.iter().copied().chain(std::iter::once(f64::INFINITY)) {
                    out.push((t_end.min(hi) - lo).max(0.0));
                    lo = hi;
                }
                out
            }
            BaselineModel::Spline { basis } => {
                let (_, upper) = basis.boundary();
                let mut out = vec![0.0; basis.len()];
                let mut edges = vec![0.0];
                edges.extend(basis.interior().iter().copied().filter(|&k| k < t_end));
                edges.push(t_end.min(upper));
                let gl = gauss_legendre(4, -1.0, 1.0).expect("valid rule");
                let mut buf = vec![0.0; basis.len()];
                for w in edges.windows(2) {
                    if w[1] <= w[0] {
                        continue;
                    }
                    let rule = gl.mapped(w[0], w[1]);
                    for (&x, &wt) in rule.nodes.iter().zip(&rule.weights) {
                        basis.eval_into(x, &mut buf);
                        for (o, v) in out.iter_mut().zip(&buf) {
                            *o += wt * v;
                        }
                    }
                }
                if t_end > upper {
                    basis.eval_into(upper, &mut buf);
                    for (o, v) in out.iter_mut().zip(&buf) {
                        *o += (t_end - upper) * v;
                    }
                }
                out
            }
        }
    }

    /// `lambda0(t)` and, when `grad` is given, its derivative with respect to
    /// the raw parameters.
    pub fn hazard(&self, t: f64, raw: &[f64], grad: Option<&mut [f64]>) -> f64 {
        match self {
            BaselineModel::Weibull => {
                let (z1, z2) = (raw[0] * raw[0], raw[1] * raw[1]);
                let lz = (z1 * t).ln();
                let h = z1 * z2 * ((z2 - 1.0) * lz).exp();
                if let Some(g) = grad {
                    // d log h / d z1 = z2 / z1, d log h / d z2 = 1/z2 + log(z1 t)
                    g[0] = h * (z2 / z1) * 2.0 * raw[0];
                    g[1] = h * (1.0 / z2 + lz) * 2.0 * raw[1];
                }
                h
            }
            BaselineModel::Piecewise { cuts } => {
                let j = cuts.iter().take_while(|&&c| c < t).count();
                if let Some(g) = grad {
                    g.iter_mut().for_each(|v| *v = 0.0);
                    g[j] = 2.0 * raw[j];
                }
                raw[j] * raw[j]
            }
            BaselineModel::Spline { basis } => {
                let b = basis.eval(t);
                if let Some(g) = grad {
                    for ((gj, bj), r) in g.iter_mut().zip(&b).zip(raw) {
                        *gj = 2.0 * r * bj;
                    }
                }
                b.iter().zip(raw).map(|(bj, r)| r * r * bj).sum()
            }
        }
    }

    /// `log lambda0(t)` and its gradient.
    pub fn log_hazard(&self, t: f64, raw: &[f64], grad: &mut [f64]) -> f64 {
        let h = self.hazard(t, raw, Some(grad));
        for g in grad.iter_mut() {
            *g /= h;
        }
        h.ln()
    }

    /// Closed-form `Lambda0(T)` and its gradient. `integrals` are the
    /// precomputed `basis_integrals(T)` for the piecewise and spline kinds.
    pub fn cumulative(&self, t_end: f64, raw: &[f64], integrals: &[f64], grad: &mut [f64]) -> f64 {
        match self {
            BaselineModel::Weibull => {
                let (z1, z2) = (raw[0] * raw[0], raw[1] * raw[1]);
                let lz = (z1 * t_end).ln();
                let c = (z2 * lz).exp();
                grad[0] = c * z2 / z1 * 2.0 * raw[0];
                grad[1] = c * lz * 2.0 * raw[1];
                c
            }
            _ => {
                let mut total = 0.0;
                for ((g, a), r) in grad.iter_mut().zip(integrals).zip(raw) {
                    *g = 2.0 * r * a;
                    total += r * r * a;
                }
                total
            }
        }
    }

    /// Raw parameters for the natural values (scale, shape, rates or spline
    /// coefficients).
    pub fn raw_from_natural(&self, natural: &[f64]) -> Result<Vec<f64>> {
        if natural.len() != self.n_params() {
            return Err(Error::validation(format!(
                "baseline hazard needs {} values, got {}",
                self.n_params(),
                natural.len()
            )));
        }
        if natural.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::validation("baseline hazard values must be nonnegative"));
        }
        Ok(natural.iter().map(|v| v.sqrt()).collect())
    }
}
