//! Maximum likelihood fit of the joint model with Wald inference.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{natural_parameters, Engine, LatentModelSpec};
use crate::error::{Error, Result};
use crate::numerics::normal::normal_sf;
use crate::numerics::optim::{marquardt_levenberg, Convergence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub name: String,
    pub value: f64,
    /// Missing when the observed information is not positive definite.
    pub se: Option<f64>,
}

impl Estimate {
    /// 95% Wald interval.
    pub fn ci95(&self) -> Option<(f64, f64)> {
        self.se.map(|s| (self.value - 1.959_963_984_540_054 * s, self.value + 1.959_963_984_540_054 * s))
    }

    /// Two-sided Wald p-value for a zero value.
    pub fn p_value(&self) -> Option<f64> {
        self.se.filter(|s| *s > 0.0).map(|s| 2.0 * normal_sf((self.value / s).abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFit {
    pub spec: LatentModelSpec,
    pub names: Vec<String>,
    pub theta: Vec<f64>,
    pub loglik: f64,
    /// Inverse observed information on the optimization scale.
    pub vcov: Option<Vec<Vec<f64>>>,
    pub estimates: Vec<Estimate>,
    /// Interpretable quantities with delta-method standard errors.
    pub natural: Vec<Estimate>,
    pub convergence: Convergence,
    pub n_patients: usize,
    pub n_observations: usize,
}

impl LatentFit {
    pub fn natural_value(&self, name: &str) -> Option<f64> {
        self.natural.iter().find(|e| e.name == name).map(|e| e.value)
    }

    pub fn vcov_matrix(&self) -> Option<DMatrix<f64>> {
        let v = self.vcov.as_ref()?;
        let p = v.len();
        Some(DMatrix::from_fn(p, p, |i, j| v[i][j]))
    }
}

/// Maximize the marginal likelihood from `start` (or data-driven values).
pub fn fit_latent(engine: &Engine, start: Option<Vec<f64>>) -> Result<LatentFit> {
    let spec = engine.spec();
    let start = start.unwrap_or_else(|| engine.initial_theta());
    if start.len() != engine.layout().len {
        return Err(Error::validation(format!(
            "start vector has length {}, model needs {}",
            start.len(),
            engine.layout().len
        )));
    }
    engine.checked_loglik(&start)?;
    let res = marquardt_levenberg(engine, &start, &spec.optimizer)?;
    if !res.convergence.converged {
        log::warn!("latent model fit did not converge: {}", res.convergence.message);
    }
    let vcov = covariance(&res.hessian);
    Ok(summarize(spec, engine, res.argmax, res.value, vcov, res.convergence))
}

/// `(-H)^-1` when `-H` is positive definite.
pub(crate) fn covariance(hessian: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if hessian.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let neg = -hessian.clone();
    let v = neg.cholesky()?.inverse();
    if (0..v.nrows()).all(|i| v[(i, i)] > 0.0) {
        Some(v)
    } else {
        None
    }
}

pub(crate) fn summarize(
    spec: &LatentModelSpec,
    engine: &Engine,
    theta: Vec<f64>,
    loglik: f64,
    vcov: Option<DMatrix<f64>>,
    convergence: Convergence,
) -> LatentFit {
    let layout = engine.layout();
    let estimates = layout
        .names
        .iter()
        .enumerate()
        .map(|(i, n)| Estimate {
            name: n.clone(),
            value: theta[i],
            se: vcov.as_ref().map(|v| v[(i, i)].sqrt()),
        })
        .collect();
    let nat = natural_parameters(spec, layout, &theta);
    let nat_se: Option<Vec<f64>> = vcov.as_ref().map(|v| {
        let p = theta.len();
        let k = nat.len();
        let mut jac = DMatrix::zeros(k, p);
        for j in 0..p {
            let h = 1e-6 * theta[j].abs().max(1.0);
            let mut up = theta.clone();
            up[j] += h;
            let mut dn = theta.clone();
            dn[j] -= h;
            let fu = natural_parameters(spec, layout, &up);
            let fd = natural_parameters(spec, layout, &dn);
            for i in 0..k {
                jac[(i, j)] = (fu[i].1 - fd[i].1) / (2.0 * h);
            }
        }
        let vn = &jac * v * jac.transpose();
        (0..k).map(|i| vn[(i, i)].max(0.0).sqrt()).collect()
    });
    let natural = nat
        .into_iter()
        .enumerate()
        .map(|(i, (name, value))| Estimate { name, value, se: nat_se.as_ref().map(|s| s[i]) })
        .collect();
    LatentFit {
        spec: spec.clone(),
        names: layout.names.clone(),
        theta,
        loglik,
        vcov: vcov.map(|v| (0..v.nrows()).map(|i| v.row(i).iter().copied().collect()).collect()),
        estimates,
        natural,
        convergence,
        n_patients: engine.n_patients(),
        n_observations: engine.n_observations(),
    }
}

impl LatentFit {
    /// A fit record at supplied parameters (no estimation, no variance),
    /// e.g. for true values in simulations. `loglik` is NaN.
    pub fn at(spec: &LatentModelSpec, theta: Vec<f64>) -> Result<LatentFit> {
        spec.validate()?;
        let layout = super::Layout::new(spec)?;
        if theta.len() != layout.len {
            return Err(Error::validation(format!(
                "parameter vector has length {}, model needs {}",
                theta.len(),
                layout.len
            )));
        }
        let estimates = layout
            .names
            .iter()
            .zip(&theta)
            .map(|(n, v)| Estimate { name: n.clone(), value: *v, se: None })
            .collect();
        let natural = natural_parameters(spec, &layout, &theta)
            .into_iter()
            .map(|(name, value)| Estimate { name, value, se: None })
            .collect();
        Ok(LatentFit {
            spec: spec.clone(),
            names: layout.names.clone(),
            theta,
            loglik: f64::NAN,
            vcov: None,
            estimates,
            natural,
            convergence: Convergence {
                converged: false,
                iterations: 0,
                param_change: 0.0,
                objective_change: 0.0,
                rdm: 0.0,
                message: "parameters supplied, not estimated".into(),
            },
            n_patients: 0,
            n_observations: 0,
        })
    }

    /// Table rows `name value (se x)` in parameter order.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for e in &self.natural {
            let se = e.se.map_or_else(|| "se unavailable".to_string(), |s| format!("se {s:.3}"));
            out.push_str(&format!("{} {:.3} ({se})\n", e.name, e.value));
        }
        out
    }
}
