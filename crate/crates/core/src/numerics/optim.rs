//! Robust Marquardt-Levenberg maximization with a three-part convergence test:
//! parameter change, objective change and the relative distance to maximum
//! `g' H^{-1} g / p`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub max_iterations: usize,
    /// Bound on the squared norm of the last accepted step.
    pub param_tolerance: f64,
    /// Bound on the absolute objective change of the last accepted step.
    pub objective_tolerance: f64,
    /// Bound on the relative distance to maximum.
    pub rdm_tolerance: f64,
    /// Multiplier on the finite-difference step `max(|theta|, 1) * 1e-4`.
    pub fd_step_scale: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            max_iterations: 200,
            param_tolerance: 1e-5,
            objective_tolerance: 1e-5,
            rdm_tolerance: 1e-4,
            fd_step_scale: 1.0,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        let tols = [
            self.param_tolerance,
            self.objective_tolerance,
            self.rdm_tolerance,
            self.fd_step_scale,
        ];
        if tols.iter().any(|t| !(*t > 0.0)) || self.max_iterations == 0 {
            return Err(Error::domain("optimizer tolerances and iteration cap must be positive"));
        }
        Ok(())
    }

    fn step(&self, x: f64) -> f64 {
        self.fd_step_scale * x.abs().max(1.0) * 1e-4
    }
}

/// Value, gradient and a positive semi-definite curvature approximation
/// (information matrix, e.g. an outer product of per-observation scores) of
/// an objective at one point.
#[derive(Debug, Clone)]
pub struct LocalModel {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub information: DMatrix<f64>,
}

/// A smooth objective to maximize. Implementations must be re-entrant: the
/// optimizer may evaluate finite-difference perturbations concurrently.
pub trait Objective: Sync {
    fn value(&self, theta: &[f64]) -> f64;

    /// Analytic gradient plus curvature approximation, when available.
    fn local_model(&self, _theta: &[f64]) -> Option<LocalModel> {
        None
    }
}

impl<F> Objective for F
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    fn value(&self, theta: &[f64]) -> f64 {
        self(theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    /// Squared norm of the last accepted step.
    pub param_change: f64,
    pub objective_change: f64,
    pub rdm: f64,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub argmax: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Finite-difference Hessian of the objective at `argmax`.
    pub hessian: DMatrix<f64>,
    pub convergence: Convergence,
}

/// RDM below which the optimizer switches from the outer-product
/// information to the differenced Hessian.
const NEWTON_SWITCH_RDM: f64 = 0.05;
/// Outer-product iterations before the switch at the latest.
const OUTER_PRODUCT_ITERATIONS: usize = 50;

/// Maximize `objective` from `start`.
///
/// Non-finite trial values reject the step and raise the damping. Hitting the
/// iteration cap returns the current point with `converged = false`.
pub fn marquardt_levenberg<O: Objective + ?Sized>(
    objective: &O,
    start: &[f64],
    settings: &OptimizerSettings,
) -> Result<OptimResult> {
    settings.validate()?;
    let p = start.len();
    let mut theta = start.to_vec();
    let mut value = objective.value(&theta);
    if !value.is_finite() {
        return Err(Error::domain("objective is not finite at the starting point"));
    }
    if p == 0 {
        return Ok(OptimResult {
            argmax: theta,
            value,
            gradient: vec![],
            hessian: DMatrix::zeros(0, 0),
            convergence: Convergence {
                converged: true,
                iterations: 0,
                param_change: 0.0,
                objective_change: 0.0,
                rdm: 0.0,
                message: "no free parameters".into(),
            },
        });
    }

    let has_model = objective.local_model(&theta).is_some();
    let mut exact = !has_model;
    let mut damping = 1e-2;
    let mut last_step: Option<(f64, f64)> = None;
    let mut rdm = f64::INFINITY;
    let mut iterations = 0;
    let mut message = String::from("iteration limit reached");
    let mut converged = false;
    let mut final_hessian: Option<(Vec<f64>, DMatrix<f64>)> = None;

    while iterations < settings.max_iterations {
        let (gradient, information) = if exact {
            let g = gradient_at(objective, &theta, settings);
            let h = hessian_at(objective, &theta, value, settings);
            let info = -h.clone();
            final_hessian = Some((g.clone(), h));
            (g, info)
        } else {
            let lm = objective
                .local_model(&theta)
                .expect("local model available");
            (lm.gradient, lm.information)
        };
        rdm = relative_distance(&gradient, &information);
        log::trace!("iteration {iterations}: value {value} rdm {rdm:.3e} exact {exact} last step {last_step:?}");
        // the outer-product information only gives linear convergence near
        // the maximum; finish with Newton steps on the differenced gradient
        if !exact && (rdm < NEWTON_SWITCH_RDM || iterations >= OUTER_PRODUCT_ITERATIONS) {
            exact = true;
            continue;
        }

        if let Some((ca, cb)) = last_step {
            if ca <= settings.param_tolerance
                && cb <= settings.objective_tolerance
                && rdm <= settings.rdm_tolerance
            {
                if exact {
                    converged = true;
                    message = "converged".into();
                    break;
                }
                // confirm against the finite-difference Hessian
                exact = true;
                continue;
            }
        }

        iterations += 1;
        let g = DVector::from_vec(gradient.clone());
        let mut accepted = None;
        for _ in 0..60 {
            let Some(step) = damped_step(&information, &g, damping) else {
                damping = (damping * 10.0).max(1e-6);
                continue;
            };
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            let trial_value = objective.value(&trial);
            if trial_value.is_finite() && trial_value > value {
                accepted = Some((trial, trial_value, step.norm_squared()));
                damping = (damping / 10.0).max(1e-12);
                break;
            }
            damping = (damping * 10.0).max(1e-6);
        }
        match accepted {
            Some((trial, trial_value, step_sq)) => {
                last_step = Some((step_sq, (trial_value - value).abs()));
                theta = trial;
                value = trial_value;
                final_hessian = None;
            }
            None => {
                // no ascent direction left at any damping: stationary up to
                // numerical noise, judge on RDM alone
                if !exact {
                    exact = true;
                    last_step = Some((0.0, 0.0));
                    continue;
                }
                message = "no improving step found".into();
                converged = rdm <= settings.rdm_tolerance;
                if converged {
                    message = "converged (step exhausted)".into();
                }
                break;
            }
        }
    }

    let (gradient, hessian) = match final_hessian {
        Some(gh) => gh,
        None => {
            let g = gradient_at(objective, &theta, settings);
            let h = hessian_at(objective, &theta, value, settings);
            rdm = relative_distance(&g, &(-h.clone()));
            (g, h)
        }
    };
    let (param_change, objective_change) = last_step.unwrap_or((f64::NAN, f64::NAN));
    Ok(OptimResult {
        argmax: theta,
        value,
        gradient,
        hessian,
        convergence: Convergence {
            converged,
            iterations,
            param_change,
            objective_change,
            rdm,
            message,
        },
    })
}

/// `g' I^{-1} g / p`, infinite when `I` is not positive definite.
pub fn relative_distance(gradient: &[f64], information: &DMatrix<f64>) -> f64 {
    let p = gradient.len();
    if p == 0 {
        return 0.0;
    }
    let sym = symmetrize(information);
    match sym.cholesky() {
        Some(ch) => {
            let g = DVector::from_column_slice(gradient);
            let x = ch.solve(&g);
            let v = g.dot(&x) / p as f64;
            if v.is_finite() && v >= 0.0 {
                v
            } else {
                f64::INFINITY
            }
        }
        None => f64::INFINITY,
    }
}

fn damped_step(information: &DMatrix<f64>, g: &DVector<f64>, damping: f64) -> Option<DVector<f64>> {
    let p = g.len();
    let mut m = symmetrize(information);
    let trace_scale = (0..p).map(|i| m[(i, i)].abs()).sum::<f64>() / p as f64;
    let floor = 1e-10 * trace_scale.max(1e-10);
    for i in 0..p {
        let d = m[(i, i)].abs().max(floor);
        m[(i, i)] += damping * d;
    }
    let ch = m.cholesky()?;
    let step = ch.solve(g);
    step.iter().all(|x| x.is_finite()).then_some(step)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn gradient_at<O: Objective + ?Sized>(objective: &O, theta: &[f64], settings: &OptimizerSettings) -> Vec<f64> {
    if let Some(lm) = objective.local_model(theta) {
        return lm.gradient;
    }
    fd_gradient(|x| objective.value(x), theta, settings)
}

/// Central-difference gradient.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64 + Sync, theta: &[f64], settings: &OptimizerSettings) -> Vec<f64> {
    (0..theta.len())
        .into_par_iter()
        .map(|i| {
            let h = settings.step(theta[i]);
            let mut up = theta.to_vec();
            up[i] += h;
            let mut dn = theta.to_vec();
            dn[i] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Hessian: from the analytic gradient when the objective
/// provides one, otherwise from objective values.
pub fn hessian_at<O: Objective + ?Sized>(objective: &O, theta: &[f64], value: f64, settings: &OptimizerSettings) -> DMatrix<f64> {
    let p = theta.len();
    if objective.local_model(theta).is_some() {
        let cols: Vec<Vec<f64>> = (0..p)
            .into_par_iter()
            .map(|j| {
                let h = settings.step(theta[j]);
                let mut up = theta.to_vec();
                up[j] += h;
                let mut dn = theta.to_vec();
                dn[j] -= h;
                let gu = objective.local_model(&up).map(|m| m.gradient);
                let gd = objective.local_model(&dn).map(|m| m.gradient);
                match (gu, gd) {
                    (Some(gu), Some(gd)) => gu.iter().zip(&gd).map(|(a, b)| (a - b) / (2.0 * h)).collect(),
                    _ => vec![f64::NAN; p],
                }
            })
            .collect();
        let h = DMatrix::from_fn(p, p, |i, j| cols[j][i]);
        return symmetrize(&h);
    }
    fd_hessian(|x| objective.value(x), theta, value, settings)
}

/// Central-difference Hessian from objective values.
pub fn fd_hessian(f: impl Fn(&[f64]) -> f64 + Sync, theta: &[f64], value: f64, settings: &OptimizerSettings) -> DMatrix<f64> {
    let p = theta.len();
    let steps: Vec<f64> = theta.iter().map(|x| settings.step(*x)).collect();
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|i| (i..p).map(move |j| (i, j))).collect();
    let entries: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let eval = |di: f64, dj: f64| {
                let mut x = theta.to_vec();
                x[i] += di;
                x[j] += dj;
                f(&x)
            };
            let (hi, hj) = (steps[i], steps[j]);
            if i == j {
                (eval(hi, 0.0) - 2.0 * value + eval(-hi, 0.0)) / (hi * hi)
            } else {
                (eval(hi, hj) - eval(hi, -hj) - eval(-hi, hj) + eval(-hi, -hj)) / (4.0 * hi * hj)
            }
        })
        .collect();
    let mut h = DMatrix::zeros(p, p);
    for (&(i, j), v) in pairs.iter().zip(entries) {
        h[(i, j)] = v;
        h[(j, i)] = v;
    }
    h
}
