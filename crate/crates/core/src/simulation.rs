//! Synthetic cohorts from known model parameters, and the recovery harness
//! that refits them.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CohortDataset, ItemDef, PatientRecord, ScaleDefinition, Visit};
use crate::error::{Error, Result};
use crate::model::hazard::BaselineModel;
use crate::model::{natural_parameters, thresholds_to_raw, Association, Layout, LatentModelSpec};
use crate::numerics::quadrature::{gauss_legendre, integrate_adaptive, GaussLegendre};
use crate::numerics::roots::brent_root;
use crate::sequencing::{self, ItemMeasurement, JlpmFit, JlpmSpec};

/// Events are never generated beyond this time.
pub const EVENT_CAP: f64 = 30.0;
const ROOT_TOL: f64 = 1e-12;
/// Width of the Gauss-Legendre panels of current-value cumulative hazards.
const PANEL_WIDTH: f64 = 0.25;
const FIRST_PANEL_TOL: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CovariateGenerator {
    Normal { mean: f64, sd: f64 },
    Bernoulli { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardTruth {
    /// Natural baseline values: Weibull scale and shape, rates, or spline
    /// coefficients.
    pub baseline: Vec<f64>,
    #[serde(default)]
    pub covariates: Vec<f64>,
    /// One value for a current-value link, one per random effect otherwise.
    #[serde(default)]
    pub association: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParameters {
    pub beta: Vec<f64>,
    /// Random-effect covariance; identity when absent. The intercept variance
    /// is fixed at 1.
    #[serde(default)]
    pub random_covariance: Option<Vec<Vec<f64>>>,
    /// Items in subdimension order.
    pub items: Vec<ItemMeasurement>,
    pub hazards: Vec<HazardTruth>,
}

/// Stages drawn as `1 + #{omega_s < Delta(t) + sd * e}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageGenerator {
    pub omega: Vec<f64>,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitSchedule {
    pub interval: f64,
    pub jitter: f64,
}

impl Default for VisitSchedule {
    fn default() -> Self {
        VisitSchedule { interval: 1.0, jitter: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub model: JlpmSpec,
    pub truth: TrueParameters,
    pub n_patients: usize,
    #[serde(default)]
    pub covariates: BTreeMap<String, CovariateGenerator>,
    #[serde(default)]
    pub schedule: VisitSchedule,
    pub censor_time: f64,
    #[serde(default)]
    pub stages: Option<StageGenerator>,
    /// Chance that a single item response is missing.
    #[serde(default)]
    pub missing_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub id: String,
    pub random_effects: Vec<f64>,
    /// `-log U` per cause; the cause-specific cumulative hazard reaches it at
    /// the latent event time.
    pub event_draws: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub seed: u64,
    pub theta: Vec<NamedValue>,
    pub natural: Vec<NamedValue>,
    pub patients: Vec<PatientTruth>,
}

impl SimTruth {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }
}

/// The data-generating model of a scenario in evaluable form.
#[derive(Debug, Clone)]
pub struct TrueModel {
    spec: LatentModelSpec,
    layout: Layout,
    theta: Vec<f64>,
    chol: Vec<f64>,
    baselines: Vec<BaselineModel>,
    rule: GaussLegendre,
}

fn named(names: &[String], values: &[f64]) -> Vec<NamedValue> {
    names.iter().zip(values).map(|(n, v)| NamedValue { name: n.clone(), value: *v }).collect()
}

impl TrueModel {
    pub fn new(model: &JlpmSpec, truth: &TrueParameters) -> Result<Self> {
        let items: Vec<ItemDef> = model
            .subdimension
            .items
            .iter()
            .zip(&truth.items)
            .map(|(id, it)| ItemDef { id: id.clone(), max_level: it.max_level() })
            .collect();
        if truth.items.len() != model.subdimension.items.len() {
            return Err(Error::validation(format!(
                "{} true items for {} subdimension items",
                truth.items.len(),
                model.subdimension.items.len()
            )));
        }
        for (id, it) in model.subdimension.items.iter().zip(&truth.items) {
            if &it.id != id {
                return Err(Error::validation(format!("true item {} where {id} was expected", it.id)));
            }
            if it.thresholds.is_empty() || !(it.sd > 0.0) || !it.sd.is_finite() {
                return Err(Error::validation(format!("item {id}: need thresholds and a positive sd")));
            }
        }
        let spec = model.latent_spec(&items);
        spec.validate()?;
        let layout = Layout::new(&spec)?;
        let theta = true_theta(&spec, &layout, truth)?;
        let nre = spec.random.len();
        let chol = layout.cholesky(&theta, nre);
        let baselines = spec.hazards.iter().map(|h| BaselineModel::new(&h.baseline)).collect::<Result<_>>()?;
        Ok(TrueModel { spec, layout, theta, chol, baselines, rule: gauss_legendre(15, -1.0, 1.0)? })
    }

    pub fn spec(&self) -> &LatentModelSpec {
        &self.spec
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn natural(&self) -> Vec<(String, f64)> {
        natural_parameters(&self.spec, &self.layout, &self.theta)
    }

    /// Random effects `b = L z`.
    pub fn random_effects(&self, z: &[f64]) -> Vec<f64> {
        let n = z.len();
        (0..n).map(|r| (0..=r).map(|s| self.chol[r * n + s] * z[s]).sum()).collect()
    }

    /// `Delta(t) = X(t) beta + Z(t) b`.
    pub fn latent(&self, covariates: &BTreeMap<String, f64>, b: &[f64], t: f64) -> Result<f64> {
        let row = self.spec.time.row(t, covariates)?;
        let nt = self.spec.time.n_time();
        let fixed: f64 = row.iter().zip(&self.theta[self.layout.beta.clone()]).map(|(x, v)| x * v).sum();
        let z = self.spec.random.row(&row[..nt]);
        Ok(fixed + z.iter().zip(b).map(|(z, b)| z * b).sum::<f64>())
    }

    fn is_null_hazard(&self, cause: usize) -> bool {
        let raw = &self.theta[self.layout.hazards[cause].base.clone()];
        match self.baselines[cause] {
            BaselineModel::Weibull => raw[0] == 0.0,
            _ => raw.iter().all(|r| *r == 0.0),
        }
    }

    fn linear_part(&self, covariates: &BTreeMap<String, f64>, b: &[f64], cause: usize) -> Result<f64> {
        let h = &self.spec.hazards[cause];
        let hl = &self.layout.hazards[cause];
        let mut lin = 0.0;
        for (c, g) in h.covariates.iter().zip(&self.theta[hl.gamma.clone()]) {
            let v = covariates.get(c).ok_or_else(|| Error::validation(format!("missing covariate {c}")))?;
            lin += g * v;
        }
        if h.association == Association::RandomEffects {
            lin += self.theta[hl.alpha.clone()].iter().zip(b).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(lin)
    }

    /// Panel edges for current-value hazards: a fixed grid plus the baseline
    /// breakpoints, up to the event cap.
    fn panel_edges(&self, cause: usize) -> Vec<f64> {
        let mut edges: Vec<f64> = (0..=(EVENT_CAP / PANEL_WIDTH) as usize).map(|j| j as f64 * PANEL_WIDTH).collect();
        edges.extend(self.baselines[cause].breakpoints().into_iter().filter(|&x| x > 0.0 && x < EVENT_CAP));
        edges.sort_by(f64::total_cmp);
        edges.dedup();
        edges
    }

    fn cv_integrand<'a>(
        &'a self,
        covariates: &'a BTreeMap<String, f64>,
        b: &'a [f64],
        cause: usize,
        lin: f64,
    ) -> impl Fn(f64) -> f64 + 'a {
        let hl = &self.layout.hazards[cause];
        let raw = &self.theta[hl.base.clone()];
        let a = self.theta[hl.alpha.start];
        let bm = &self.baselines[cause];
        move |u: f64| match self.latent(covariates, b, u) {
            Ok(d) => bm.hazard(u, raw, None) * (lin + a * d).exp(),
            Err(_) => f64::NAN,
        }
    }

    /// Cause-specific cumulative hazard `Lambda(t; b)` for a patient.
    pub fn cumulative_hazard(&self, covariates: &BTreeMap<String, f64>, b: &[f64], cause: usize, t: f64) -> Result<f64> {
        self.cumulative_fn(covariates, b, cause).map(|f| f(t))
    }

    /// `t -> Lambda(t; b)`. Under a current-value link the full panels are
    /// integrated once and only the last partial panel per call.
    fn cumulative_fn<'a>(
        &'a self,
        covariates: &'a BTreeMap<String, f64>,
        b: &'a [f64],
        cause: usize,
    ) -> Result<Box<dyn Fn(f64) -> f64 + 'a>> {
        if self.is_null_hazard(cause) {
            return Ok(Box::new(|_| 0.0));
        }
        let lin = self.linear_part(covariates, b, cause)?;
        let hl = &self.layout.hazards[cause];
        let raw = &self.theta[hl.base.clone()];
        let bm = &self.baselines[cause];
        if self.spec.hazards[cause].association != Association::CurrentValue {
            return Ok(Box::new(move |t: f64| {
                if t <= 0.0 {
                    return 0.0;
                }
                let integrals = if bm.is_linear_in_squares() { bm.basis_integrals(t) } else { vec![] };
                let mut grad = vec![0.0; raw.len()];
                bm.cumulative(t, raw, &integrals, &mut grad) * lin.exp()
            }));
        }
        let f = self.cv_integrand(covariates, b, cause, lin);
        // a Weibull hazard is not smooth at 0; bisect the first panel
        let panel = move |a: f64, z: f64| {
            if a == 0.0 {
                integrate_adaptive(&f, a, z, &self.rule, FIRST_PANEL_TOL)
            } else {
                self.rule.mapped(a, z).integrate(&f)
            }
        };
        let edges = self.panel_edges(cause);
        let mut prefix = Vec::with_capacity(edges.len());
        let mut acc = 0.0;
        prefix.push(acc);
        for e in edges.windows(2) {
            acc += panel(e[0], e[1]);
            prefix.push(acc);
        }
        Ok(Box::new(move |t: f64| {
            if t <= 0.0 {
                return 0.0;
            }
            let j = edges.partition_point(|&e| e <= t).saturating_sub(1).min(edges.len() - 2);
            prefix[j] + panel(edges[j], t)
        }))
    }

    /// Time at which the cumulative hazard reaches `target`; `None` when that
    /// does not happen before the event cap.
    pub fn invert_cumulative(&self, covariates: &BTreeMap<String, f64>, b: &[f64], cause: usize, target: f64) -> Result<Option<f64>> {
        if self.is_null_hazard(cause) {
            return Ok(None);
        }
        let lambda = self.cumulative_fn(covariates, b, cause)?;
        let at_cap = lambda(EVENT_CAP);
        if !at_cap.is_finite() {
            return Err(Error::domain(format!("cumulative hazard of cause {} is not finite", cause + 1)));
        }
        if at_cap < target {
            return Ok(None);
        }
        brent_root(|t| lambda(t) - target, 0.0, EVENT_CAP, ROOT_TOL).map(Some)
    }
}

fn true_theta(spec: &LatentModelSpec, layout: &Layout, truth: &TrueParameters) -> Result<Vec<f64>> {
    let mut theta = vec![0.0; layout.len];
    if truth.beta.len() != layout.beta.len() {
        return Err(Error::validation(format!(
            "{} fixed effects given, the time design has {}",
            truth.beta.len(),
            layout.beta.len()
        )));
    }
    theta[layout.beta.clone()].copy_from_slice(&truth.beta);

    let nre = spec.random.len();
    let cov = match &truth.random_covariance {
        Some(c) => {
            if c.len() != nre || c.iter().any(|r| r.len() != nre) {
                return Err(Error::validation(format!("random-effect covariance must be {nre} x {nre}")));
            }
            DMatrix::from_fn(nre, nre, |r, s| c[r][s])
        }
        None => DMatrix::identity(nre, nre),
    };
    if (cov[(0, 0)] - 1.0).abs() > 1e-12 {
        return Err(Error::validation("the random intercept variance is fixed at 1"));
    }
    for r in 0..nre {
        for s in 0..r {
            if (cov[(r, s)] - cov[(s, r)]).abs() > 1e-12 {
                return Err(Error::validation("random-effect covariance must be symmetric"));
            }
            if spec.random.diagonal && cov[(r, s)] != 0.0 {
                return Err(Error::validation("diagonal random effects cannot have covariances"));
            }
        }
    }
    let l = cov
        .cholesky()
        .ok_or_else(|| Error::validation("random-effect covariance is not positive definite"))?
        .l();
    for (i, &(r, s)) in layout.chol_entries.iter().enumerate() {
        theta[layout.chol.start + i] = if r == s { l[(r, r)].ln() } else { l[(r, s)] };
    }

    for (it, range) in truth.items.iter().zip(&layout.outcomes) {
        let raw = thresholds_to_raw(&it.thresholds)?;
        let m = raw.len();
        theta[range.start..range.start + m].copy_from_slice(&raw);
        theta[range.start + m] = it.sd.ln();
    }

    if truth.hazards.len() != spec.hazards.len() {
        return Err(Error::validation(format!(
            "{} true hazards for {} causes",
            truth.hazards.len(),
            spec.hazards.len()
        )));
    }
    for ((h, ht), hl) in spec.hazards.iter().zip(&truth.hazards).zip(&layout.hazards) {
        let bm = BaselineModel::new(&h.baseline)?;
        theta[hl.base.clone()].copy_from_slice(&bm.raw_from_natural(&ht.baseline)?);
        if ht.covariates.len() != hl.gamma.len() || ht.association.len() != hl.alpha.len() {
            return Err(Error::validation(format!(
                "hazard {}: needs {} covariate effects and {} association values",
                h.name,
                hl.gamma.len(),
                hl.alpha.len()
            )));
        }
        theta[hl.gamma.clone()].copy_from_slice(&ht.covariates);
        theta[hl.alpha.clone()].copy_from_slice(&ht.association);
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("true parameters must be finite"));
    }
    Ok(theta)
}

impl SimScenario {
    pub fn validate(&self) -> Result<TrueModel> {
        if self.n_patients == 0 {
            return Err(Error::validation("at least one patient is required"));
        }
        if !(self.censor_time > 0.0) || !self.censor_time.is_finite() {
            return Err(Error::validation("censoring time must be positive"));
        }
        let s = &self.schedule;
        if !(s.interval > 0.0) || !(s.jitter >= 0.0) || s.jitter * 2.0 >= s.interval {
            return Err(Error::validation("visit jitter must be below half the visit interval"));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::validation("missing rate must be in [0, 1)"));
        }
        if let Some(g) = &self.stages {
            if g.omega.is_empty() || g.omega.windows(2).any(|w| !(w[1] > w[0])) || !(g.sd > 0.0) {
                return Err(Error::validation("stage thresholds must increase and the stage sd be positive"));
            }
        }
        for (name, g) in &self.covariates {
            let ok = match g {
                CovariateGenerator::Normal { mean, sd } => mean.is_finite() && *sd >= 0.0 && sd.is_finite(),
                CovariateGenerator::Bernoulli { p } => (0.0..=1.0).contains(p),
            };
            if !ok {
                return Err(Error::validation(format!("covariate generator {name} is invalid")));
            }
        }
        let model = TrueModel::new(&self.model, &self.truth)?;
        for c in model.spec.required_covariates() {
            if !self.covariates.contains_key(&c) {
                return Err(Error::validation(format!("no generator for covariate {c}")));
            }
        }
        Ok(model)
    }
}

fn simulate_patient(scn: &SimScenario, model: &TrueModel, i: usize) -> Result<(PatientRecord, PatientTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(scn.seed);
    rng.set_stream(i as u64);
    let id = format!("p{:05}", i + 1);

    let mut covariates = BTreeMap::new();
    for (name, g) in &scn.covariates {
        let v = match g {
            CovariateGenerator::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            CovariateGenerator::Bernoulli { p } => f64::from(u8::from(rng.gen::<f64>() < *p)),
        };
        covariates.insert(name.clone(), v);
    }
    let nre = model.spec.random.len();
    let z: Vec<f64> = (0..nre).map(|_| rng.sample(StandardNormal)).collect();
    let b = model.random_effects(&z);

    let n_causes = model.spec.hazards.len();
    let draws: Vec<f64> = (0..n_causes).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let mut event = (f64::INFINITY, 0u32);
    for (k, e) in draws.iter().enumerate() {
        if let Some(t) = model.invert_cumulative(&covariates, &b, k, *e)? {
            if t < event.0 {
                event = (t, k as u32 + 1);
            }
        }
    }
    let end = scn.censor_time.min(EVENT_CAP);
    if event.0 > end {
        event = (end, 0);
    }

    let items = &scn.truth.items;
    let mut visits = Vec::new();
    let mut k = 0usize;
    loop {
        let t = if k == 0 {
            0.0
        } else {
            let j = scn.schedule.jitter;
            k as f64 * scn.schedule.interval + if j > 0.0 { rng.gen_range(-j..j) } else { 0.0 }
        };
        if t >= event.0 {
            break;
        }
        let delta = model.latent(&covariates, &b, t)?;
        let responses = items
            .iter()
            .map(|it| {
                let y = delta + it.sd * rng.sample::<f64, _>(StandardNormal);
                let level = it.thresholds.iter().filter(|&&d| d < y).count() as u32;
                let missing = scn.missing_rate > 0.0 && rng.gen::<f64>() < scn.missing_rate;
                (!missing).then_some(level)
            })
            .collect();
        let stage = scn.stages.as_ref().map(|g| {
            let y = delta + g.sd * rng.sample::<f64, _>(StandardNormal);
            1 + g.omega.iter().filter(|&&w| w < y).count() as u32
        });
        visits.push(Visit { time: t, responses, stage });
        k += 1;
    }
    let record = PatientRecord {
        id: id.clone(),
        covariates: covariates.into_iter().map(|(k, v)| (k, Some(v))).collect(),
        visits,
        event_time: event.0,
        event_cause: event.1,
    };
    Ok((record, PatientTruth { id, random_effects: b, event_draws: draws }))
}

/// Generate a cohort and the record of the values that produced it.
pub fn simulate_cohort(scn: &SimScenario) -> Result<(CohortDataset, SimTruth)> {
    let model = scn.validate()?;
    let rows = (0..scn.n_patients)
        .into_par_iter()
        .map(|i| simulate_patient(scn, &model, i))
        .collect::<Result<Vec<_>>>()?;
    let (patients, truths): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let scale = ScaleDefinition::new(
        scn.truth
            .items
            .iter()
            .map(|it| ItemDef { id: it.id.clone(), max_level: it.max_level() })
            .collect(),
    )?;
    let data = CohortDataset {
        scale,
        patients,
        n_stages: scn.stages.as_ref().map_or(2, |g| g.omega.len() as u32 + 1),
        n_causes: model.spec.hazards.len() as u32,
    };
    data.validate()?;
    let truth = SimTruth {
        seed: scn.seed,
        theta: named(&model.layout.names, &model.theta),
        natural: model.natural().into_iter().map(|(name, value)| NamedValue { name, value }).collect(),
        patients: truths,
    };
    Ok((data, truth))
}

/// Outcome of one simulate and refit cycle.
#[derive(Debug, Clone)]
pub struct RecoveryRun {
    pub seed: u64,
    pub fit: std::result::Result<JlpmFit, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRecovery {
    pub name: String,
    pub truth: f64,
    pub mean_estimate: f64,
    /// Median of `(estimate - truth) / |truth|`; undefined for a zero truth.
    pub median_relative_bias: Option<f64>,
    pub empirical_se: f64,
    pub mean_model_se: Option<f64>,
    /// Share of fits whose 95% Wald interval holds the truth.
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub n_seeds: usize,
    pub n_converged: usize,
    pub n_failed: usize,
    pub failures: Vec<String>,
    pub parameters: Vec<ParameterRecovery>,
}

impl RecoveryReport {
    pub fn parameter(&self, name: &str) -> Option<&ParameterRecovery> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }
}

/// Simulate and refit under seeds `scn.seed, scn.seed + 1, ..`, starting each
/// fit at the true values.
pub fn recovery_runs(scn: &SimScenario, seeds: usize) -> Result<Vec<RecoveryRun>> {
    if seeds == 0 {
        return Err(Error::validation("at least one seed is required"));
    }
    let model = scn.validate()?;
    let start = model.theta.clone();
    Ok((0..seeds as u64)
        .into_par_iter()
        .map(|k| {
            let mut s = scn.clone();
            s.seed = scn.seed.wrapping_add(k);
            let fit = simulate_cohort(&s)
                .and_then(|(data, _)| sequencing::fit(&s.model, &data, Some(start.clone())))
                .map_err(|e| e.to_string());
            RecoveryRun { seed: s.seed, fit }
        })
        .collect())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Bias, spread and interval coverage of the natural-scale estimates over the
/// converged runs.
pub fn summarize_recovery(scn: &SimScenario, runs: &[RecoveryRun]) -> Result<RecoveryReport> {
    let truth = scn.validate()?.natural();
    let mut failures = Vec::new();
    let mut good = Vec::new();
    for r in runs {
        match &r.fit {
            Ok(f) if f.converged() => good.push(f),
            Ok(f) => failures.push(format!("seed {}: {}", r.seed, f.fit.convergence.message)),
            Err(e) => failures.push(format!("seed {}: {e}", r.seed)),
        }
    }
    let parameters = truth
        .iter()
        .enumerate()
        .map(|(j, (name, t))| {
            let est: Vec<f64> = good.iter().map(|f| f.fit.natural[j].value).collect();
            let n = est.len() as f64;
            let mean = est.iter().sum::<f64>() / n;
            let sd = if est.len() > 1 {
                (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                f64::NAN
            };
            let ses: Vec<f64> = good.iter().filter_map(|f| f.fit.natural[j].se).collect();
            let covered: Vec<bool> = good
                .iter()
                .filter_map(|f| f.fit.natural[j].ci95())
                .map(|(lo, hi)| lo <= *t && *t <= hi)
                .collect();
            ParameterRecovery {
                name: name.clone(),
                truth: *t,
                mean_estimate: mean,
                median_relative_bias: (t.abs() > 1e-12 && !est.is_empty())
                    .then(|| median(est.iter().map(|e| (e - t) / t.abs()).collect())),
                empirical_se: sd,
                mean_model_se: (!ses.is_empty()).then(|| ses.iter().sum::<f64>() / ses.len() as f64),
                coverage: (!covered.is_empty())
                    .then(|| covered.iter().filter(|c| **c).count() as f64 / covered.len() as f64),
            }
        })
        .collect();
    Ok(RecoveryReport {
        n_seeds: runs.len(),
        n_converged: good.len(),
        n_failed: runs.len() - good.len(),
        failures,
        parameters,
    })
}

/// Repeated simulate and refit; non-converged seeds are excluded and counted.
pub fn recovery_harness(scn: &SimScenario, seeds: usize) -> Result<RecoveryReport> {
    let runs = recovery_runs(scn, seeds)?;
    summarize_recovery(scn, &runs)
}


/// Cross-sectional ordinal battery: each visit draws a fresh latent normal
/// vector with the given correlation and cuts every coordinate at the common
/// thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalBattery {
    pub items: Vec<String>,
    pub latent_correlation: Vec<Vec<f64>>,
    /// Increasing; an item has `thresholds.len() + 1` levels.
    pub thresholds: Vec<f64>,
    pub n_patients: usize,
    pub visits_per_patient: usize,
    pub seed: u64,
}

impl OrdinalBattery {
    /// Items `q01, q02, ...` in blocks of the given sizes, correlated `within`
    /// inside a block and `cross` across blocks.
    pub fn blocks(sizes: &[usize], within: f64, cross: f64, thresholds: Vec<f64>, n_patients: usize, seed: u64) -> Self {
        let block: Vec<usize> = sizes.iter().enumerate().flat_map(|(b, &n)| std::iter::repeat(b).take(n)).collect();
        let p = block.len();
        OrdinalBattery {
            items: (1..=p).map(|i| format!("q{i:02}")).collect(),
            latent_correlation: (0..p)
                .map(|i| (0..p).map(|j| if i == j { 1.0 } else if block[i] == block[j] { within } else { cross }).collect())
                .collect(),
            thresholds,
            n_patients,
            visits_per_patient: 1,
            seed,
        }
    }
}

/// Generate the battery as a cohort with yearly visits and no events.
pub fn simulate_battery(spec: &OrdinalBattery) -> Result<CohortDataset> {
    let p = spec.items.len();
    if p == 0 || spec.n_patients == 0 || spec.visits_per_patient == 0 {
        return Err(Error::validation("battery needs items, patients and visits"));
    }
    if spec.latent_correlation.len() != p || spec.latent_correlation.iter().any(|r| r.len() != p) {
        return Err(Error::validation("latent correlation does not match the items"));
    }
    if spec.thresholds.is_empty() || spec.thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::validation("battery thresholds must be nonempty and increasing"));
    }
    let r = DMatrix::from_fn(p, p, |i, j| spec.latent_correlation[i][j]);
    let chol = r
        .cholesky()
        .ok_or_else(|| Error::validation("latent correlation is not positive definite"))?
        .l();
    let patients = (0..spec.n_patients)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let visits = (0..spec.visits_per_patient)
                .map(|v| {
                    let z = nalgebra::DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let y = &chol * z;
                    let responses = y.iter().map(|&x| Some(spec.thresholds.iter().filter(|&&d| d < x).count() as u32)).collect();
                    Visit { time: v as f64, responses, stage: None }
                })
                .collect();
            PatientRecord {
                id: format!("p{:05}", i + 1),
                covariates: BTreeMap::new(),
                visits,
                event_time: spec.visits_per_patient as f64,
                event_cause: 0,
            }
        })
        .collect();
    let max_level = spec.thresholds.len() as u32;
    let data = CohortDataset {
        scale: ScaleDefinition::new(spec.items.iter().map(|id| ItemDef { id: id.clone(), max_level }).collect())?,
        patients,
        n_stages: 2,
        n_causes: 1,
    };
    data.validate()?;
    Ok(data)
}
