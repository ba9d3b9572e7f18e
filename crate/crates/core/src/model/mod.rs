//! Joint latent process model shared by sequencing and staging: a linear
//! mixed model for the latent process, one measurement model per outcome and
//! cause-specific proportional hazards linked to the process.

mod engine;
mod fit;
pub mod hazard;
pub mod outcome;

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::optim::OptimizerSettings;
use crate::numerics::splines::{SplineBasis, SplineKind};

pub use engine::Engine;
pub use fit::{fit_latent, Estimate, LatentFit};
pub use hazard::Baseline;
pub use outcome::{link_inverse, link_value, thresholds_from_raw, thresholds_to_raw, LinkSpec, OutcomeSpec};

use hazard::BaselineModel;

/// Upper bound on the number of random effects.
pub const MAX_RANDOM_EFFECTS: usize = 10;

/// Default QMC points: a full 2^9 Sobol net.
pub const DEFAULT_QMC_POINTS: usize = 512;

/// Fixed-effect design: a natural cubic spline of time (no intercept),
/// time-invariant covariates and covariate-by-time interactions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeDesign {
    pub basis: SplineBasis,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Covariates interacting with every time-basis column.
    #[serde(default)]
    pub time_interactions: Vec<String>,
}

impl TimeDesign {
    pub fn n_time(&self) -> usize {
        self.basis.len()
    }

    pub fn n_fixed(&self) -> usize {
        self.n_time() * (1 + self.time_interactions.len()) + self.covariates.len()
    }

    pub fn column_names(&self) -> Vec<String> {
        let time: Vec<String> = (1..=self.n_time()).map(|j| format!("splines{j}")).collect();
        let mut out = time.clone();
        out.extend(self.covariates.iter().cloned());
        for c in &self.time_interactions {
            out.extend(time.iter().map(|t| format!("{c}:{t}")));
        }
        out
    }

    /// Row of the fixed-effect design at time `t`.
    pub fn row(&self, t: f64, covariates: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
        let f = self.basis.eval(t);
        let mut out = f.clone();
        let get = |c: &String| {
            covariates
                .get(c)
                .copied()
                .ok_or_else(|| Error::validation(format!("profile is missing covariate {c}")))
        };
        for c in &self.covariates {
            out.push(get(c)?);
        }
        for c in &self.time_interactions {
            let v = get(c)?;
            out.extend(f.iter().map(|x| x * v));
        }
        Ok(out)
    }
}

/// Random effects: always a random intercept (variance fixed to 1), plus
/// random slopes on the listed time-basis columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RandomEffects {
    #[serde(default)]
    pub time_columns: Vec<usize>,
    /// Uncorrelated random effects instead of a full covariance.
    #[serde(default)]
    pub diagonal: bool,
}

impl RandomEffects {
    pub fn len(&self) -> usize {
        1 + self.time_columns.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn row(&self, time_row: &[f64]) -> Vec<f64> {
        std::iter::once(1.0)
            .chain(self.time_columns.iter().map(|&j| time_row[j]))
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        std::iter::once("intercept".to_string())
            .chain(self.time_columns.iter().map(|j| format!("splines{}", j + 1)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Association {
    None,
    /// Log-hazard shifted by `alpha' b`.
    RandomEffects,
    /// Log-hazard shifted by `alpha * latent(t)`.
    CurrentValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardSpec {
    pub name: String,
    pub baseline: Baseline,
    #[serde(default)]
    pub covariates: Vec<String>,
    pub association: Association,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentModelSpec {
    pub time: TimeDesign,
    #[serde(default)]
    pub random: RandomEffects,
    pub outcomes: Vec<OutcomeSpec>,
    pub hazards: Vec<HazardSpec>,
    #[serde(default = "default_qmc")]
    pub qmc_points: usize,
    /// Gauss-Legendre nodes per segment for cumulative hazards under a
    /// current-value association (doubled when `|alpha| > 2`).
    #[serde(default = "default_quad")]
    pub quadrature_nodes: usize,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
}

fn default_qmc() -> usize {
    DEFAULT_QMC_POINTS
}

fn default_quad() -> usize {
    15
}

impl LatentModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.time.basis.kind() != SplineKind::NaturalCubic {
            return Err(Error::validation("time basis must be a natural cubic spline"));
        }
        if self.random.len() > MAX_RANDOM_EFFECTS {
            return Err(Error::validation(format!(
                "at most {MAX_RANDOM_EFFECTS} random effects are supported"
            )));
        }
        let mut cols = self.random.time_columns.clone();
        cols.sort_unstable();
        cols.dedup();
        if cols.len() != self.random.time_columns.len() || cols.iter().any(|&c| c >= self.time.n_time()) {
            return Err(Error::validation("random-effect columns must be distinct time-basis columns"));
        }
        if self.outcomes.is_empty() {
            return Err(Error::validation("at least one outcome is required"));
        }
        for o in &self.outcomes {
            match o {
                OutcomeSpec::Ordinal { name, max_level } if *max_level < 1 => {
                    return Err(Error::validation(format!("outcome {name} needs at least two levels")));
                }
                OutcomeSpec::Curvilinear { link, .. } => link.validate()?,
                _ => {}
            }
        }
        if self.hazards.is_empty() {
            return Err(Error::validation("at least one event cause is required"));
        }
        for h in &self.hazards {
            BaselineModel::new(&h.baseline)?;
        }
        if self.qmc_points == 0 || self.quadrature_nodes == 0 {
            return Err(Error::validation("QMC points and quadrature nodes must be positive"));
        }
        self.optimizer.validate()
    }

    /// Covariate names needed by the fixed effects and the hazards.
    pub fn required_covariates(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .time
            .covariates
            .iter()
            .chain(&self.time.time_interactions)
            .chain(self.hazards.iter().flat_map(|h| &h.covariates))
            .cloned()
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

/// Positions of each parameter block in the unconstrained vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub beta: Range<usize>,
    pub chol: Range<usize>,
    /// `(row, col)` of each free Cholesky entry; diagonal entries are on the
    /// log scale.
    pub chol_entries: Vec<(usize, usize)>,
    pub outcomes: Vec<Range<usize>>,
    pub hazards: Vec<HazardLayout>,
    pub len: usize,
    pub names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HazardLayout {
    pub base: Range<usize>,
    pub gamma: Range<usize>,
    pub alpha: Range<usize>,
}

impl Layout {
    pub fn new(spec: &LatentModelSpec) -> Result<Self> {
        let mut names = Vec::new();
        let mut at = 0;
        let mut block = |n: usize, names_in: Vec<String>, names: &mut Vec<String>| {
            debug_assert_eq!(n, names_in.len());
            let r = at..at + n;
            at += n;
            names.extend(names_in);
            r
        };
        let beta = block(spec.time.n_fixed(), spec.time.column_names(), &mut names);

        let nre = spec.random.len();
        let mut chol_entries = Vec::new();
        for r in 1..nre {
            if !spec.random.diagonal {
                for s in 0..r {
                    chol_entries.push((r, s));
                }
            }
            chol_entries.push((r, r));
        }
        let chol_names = chol_entries
            .iter()
            .map(|&(r, s)| {
                if r == s {
                    format!("log_chol[{},{}]", r + 1, s + 1)
                } else {
                    format!("chol[{},{}]", r + 1, s + 1)
                }
            })
            .collect();
        let chol = block(chol_entries.len(), chol_names, &mut names);

        let mut outcomes = Vec::new();
        for o in &spec.outcomes {
            let n = o.name();
            let on: Vec<String> = match o {
                OutcomeSpec::Ordinal { max_level, .. } => std::iter::once(format!("{n}.threshold1"))
                    .chain((2..=*max_level).map(|m| format!("{n}.sqrt_increment{m}")))
                    .chain(std::iter::once(format!("{n}.log_sd")))
                    .collect(),
                OutcomeSpec::Curvilinear { link, .. } => std::iter::once(format!("{n}.link0"))
                    .chain((1..=link.len()).map(|j| format!("{n}.sqrt_link{j}")))
                    .chain(std::iter::once(format!("{n}.log_sd")))
                    .collect(),
            };
            outcomes.push(block(on.len(), on, &mut names));
        }

        let mut hazards = Vec::new();
        for h in &spec.hazards {
            let bm = BaselineModel::new(&h.baseline)?;
            let bn: Vec<String> = bm.param_names().into_iter().map(|s| format!("{}.{s}", h.name)).collect();
            let base = block(bn.len(), bn, &mut names);
            let gn: Vec<String> = h.covariates.iter().map(|c| format!("{}.{c}", h.name)).collect();
            let gamma = block(gn.len(), gn, &mut names);
            let an: Vec<String> = match h.association {
                Association::None => vec![],
                Association::CurrentValue => vec![format!("{}.alpha", h.name)],
                Association::RandomEffects => spec
                    .random
                    .names()
                    .iter()
                    .map(|r| format!("{}.alpha[{r}]", h.name))
                    .collect(),
            };
            let alpha = block(an.len(), an, &mut names);
            hazards.push(HazardLayout { base, gamma, alpha });
        }
        Ok(Layout {
            beta,
            chol,
            chol_entries,
            outcomes,
            hazards,
            len: at,
            names,
        })
    }

    /// Lower-triangular Cholesky factor (row-major, `n x n`) with `L[0,0] = 1`.
    pub fn cholesky(&self, theta: &[f64], n: usize) -> Vec<f64> {
        let mut l = vec![0.0; n * n];
        l[0] = 1.0;
        for (i, &(r, s)) in self.chol_entries.iter().enumerate() {
            let v = theta[self.chol.start + i];
            l[r * n + s] = if r == s { v.exp() } else { v };
        }
        for r in 1..n {
            if !self.chol_entries.contains(&(r, r)) {
                l[r * n + r] = 1.0;
            }
        }
        l
    }
}

/// Observations handed to the engine: one value per outcome and visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPatient {
    pub id: String,
    pub covariates: BTreeMap<String, f64>,
    pub visits: Vec<LatentVisit>,
    pub event_time: f64,
    /// 0 = censored, otherwise 1-based hazard index.
    pub event_cause: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVisit {
    pub time: f64,
    pub values: Vec<Option<f64>>,
}

/// Natural-scale quantities reported for a parameter vector: fixed effects,
/// random-effect covariance, thresholds or link coefficients with error SDs,
/// and hazard parameters.
pub fn natural_parameters(spec: &LatentModelSpec, layout: &Layout, theta: &[f64]) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (n, v) in spec.time.column_names().into_iter().zip(&theta[layout.beta.clone()]) {
        out.push((n, *v));
    }
    let nre = spec.random.len();
    if nre > 1 {
        let l = layout.cholesky(theta, nre);
        let re = spec.random.names();
        for r in 1..nre {
            for s in 0..=r {
                if spec.random.diagonal && s != r {
                    continue;
                }
                let v: f64 = (0..nre).map(|k| l[r * nre + k] * l[s * nre + k]).sum();
                let name = if r == s {
                    format!("variance {}", re[r])
                } else {
                    format!("covariance {} {}", re[s], re[r])
                };
                out.push((name, v));
            }
        }
    }
    for (o, range) in spec.outcomes.iter().zip(&layout.outcomes) {
        let raw = &theta[range.clone()];
        let n = o.name();
        match o {
            OutcomeSpec::Ordinal { max_level, .. } => {
                let m = *max_level as usize;
                for (j, d) in thresholds_from_raw(&raw[..m]).into_iter().enumerate() {
                    out.push((format!("{n} threshold{}", j + 1), d));
                }
                out.push((format!("{n} sd"), raw[m].exp()));
            }
            OutcomeSpec::Curvilinear { link, .. } => {
                out.push((format!("{n} link intercept"), raw[0]));
                for j in 0..link.len() {
                    out.push((format!("{n} link coef{}", j + 1), raw[1 + j] * raw[1 + j]));
                }
                out.push((format!("{n} sd"), raw[1 + link.len()].exp()));
            }
        }
    }
    for (h, hl) in spec.hazards.iter().zip(&layout.hazards) {
        let bm = BaselineModel::new(&h.baseline).expect("validated");
        for (name, v) in bm.natural_names().into_iter().zip(&theta[hl.base.clone()]) {
            out.push((format!("{} {name}", h.name), v * v));
        }
        for (c, v) in h.covariates.iter().zip(&theta[hl.gamma.clone()]) {
            out.push((format!("{} {c}", h.name), *v));
        }
        match h.association {
            Association::None => {}
            Association::CurrentValue => {
                out.push((format!("{} current level association", h.name), theta[hl.alpha.start]));
            }
            Association::RandomEffects => {
                for (r, v) in spec.random.names().iter().zip(&theta[hl.alpha.clone()]) {
                    out.push((format!("{} random effect association {r}", h.name), *v));
                }
            }
        }
    }
    out
}
