//! Joint latent process model for one subdimension: item probabilities,
//! predicted item trajectories and the impairment sequence.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{CohortDataset, ItemDef, Subdimension};
use crate::error::{Error, Result};
use crate::model::{
    fit_latent, thresholds_from_raw, Engine, HazardSpec, LatentFit, LatentModelSpec, LatentPatient, LatentVisit,
    OutcomeSpec, RandomEffects, TimeDesign, DEFAULT_QMC_POINTS,
};
use crate::numerics::normal::{normal_cdf, normal_interval};
use crate::numerics::optim::OptimizerSettings;
use crate::numerics::sobol::sobol_normal_centered;
use crate::util::{csv_bytes, csv_writer, fmt_f64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JlpmSpec {
    pub subdimension: Subdimension,
    pub time: TimeDesign,
    #[serde(default)]
    pub random: RandomEffects,
    pub hazards: Vec<HazardSpec>,
    #[serde(default = "default_qmc")]
    pub qmc_points: usize,
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

impl JlpmSpec {
    /// Item definitions of the subdimension, in subdimension order.
    pub fn items(&self, data: &CohortDataset) -> Result<Vec<ItemDef>> {
        let idx = data.scale.indices(&self.subdimension)?;
        if idx.is_empty() {
            return Err(Error::validation(format!("subdimension {} has no items", self.subdimension.name)));
        }
        Ok(idx.iter().map(|&k| data.scale.items[k].clone()).collect())
    }

    pub fn latent_spec(&self, items: &[ItemDef]) -> LatentModelSpec {
        LatentModelSpec {
            time: self.time.clone(),
            random: self.random.clone(),
            outcomes: items
                .iter()
                .map(|i| OutcomeSpec::Ordinal { name: i.id.clone(), max_level: i.max_level })
                .collect(),
            hazards: self.hazards.clone(),
            qmc_points: self.qmc_points,
            quadrature_nodes: self.quadrature_nodes,
            optimizer: self.optimizer.clone(),
        }
    }
}

/// Patients as model input: item levels of the subdimension and the
/// covariates required by `spec`.
pub(crate) fn latent_patients(spec: &LatentModelSpec, data: &CohortDataset, idx: &[usize]) -> Result<Vec<LatentPatient>> {
    let needed = spec.required_covariates();
    data.patients
        .iter()
        .map(|p| {
            let mut covariates = BTreeMap::new();
            for c in &needed {
                let v = p
                    .covariate(c)
                    .ok_or_else(|| Error::validation(format!("patient {}: covariate {c} is missing", p.id)))?;
                covariates.insert(c.clone(), v);
            }
            Ok(LatentPatient {
                id: p.id.clone(),
                covariates,
                visits: p
                    .visits
                    .iter()
                    .map(|v| LatentVisit {
                        time: v.time,
                        values: idx.iter().map(|&k| v.responses[k].map(f64::from)).collect(),
                    })
                    .collect(),
                event_time: p.event_time,
                event_cause: p.event_cause,
            })
        })
        .collect()
}

fn build_engine(spec: &JlpmSpec, data: &CohortDataset) -> Result<(Vec<ItemDef>, Engine)> {
    let items = spec.items(data)?;
    let idx = data.scale.indices(&spec.subdimension)?;
    let lspec = spec.latent_spec(&items);
    let patients = latent_patients(&lspec, data, &idx)?;
    Ok((items, Engine::new(&lspec, &patients)?))
}

/// Measurement model of one item: thresholds and error SD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMeasurement {
    pub id: String,
    /// `delta_1 <= .. <= delta_M`.
    pub thresholds: Vec<f64>,
    pub sd: f64,
}

impl ItemMeasurement {
    pub fn max_level(&self) -> u32 {
        self.thresholds.len() as u32
    }

    pub fn discrimination(&self) -> f64 {
        1.0 / self.sd
    }

    /// `P(Y = level | latent = delta)`; zero outside `0..=M`.
    pub fn probability(&self, level: u32, delta: f64) -> f64 {
        let m = self.thresholds.len();
        let level = level as usize;
        if level > m {
            return 0.0;
        }
        let a = self.discrimination();
        let lo = if level == 0 { f64::NEG_INFINITY } else { a * (self.thresholds[level - 1] - delta) };
        let hi = if level == m { f64::INFINITY } else { a * (self.thresholds[level] - delta) };
        normal_interval(lo, hi)
    }

    /// `E[Y | latent = delta] = M - sum_m Phi(a (delta_{m+1} - delta))`.
    pub fn expected_level(&self, delta: f64) -> f64 {
        let a = self.discrimination();
        self.thresholds.len() as f64 - self.thresholds.iter().map(|d| normal_cdf(a * (d - delta))).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementParams {
    pub items: Vec<ItemMeasurement>,
}

impl MeasurementParams {
    pub fn item(&self, id: &str) -> Option<&ItemMeasurement> {
        self.items.iter().find(|i| i.id == id)
    }

    /// Expected sum-score of all items at latent value `delta`.
    pub fn expected_sum(&self, delta: f64) -> f64 {
        self.items.iter().map(|i| i.expected_level(delta)).sum()
    }

    pub fn max_sum(&self) -> f64 {
        self.items.iter().map(|i| i.thresholds.len() as f64).sum()
    }
}

/// `P(Y^k = level | latent = delta)` for item index `item`.
pub fn item_level_probability(meas: &MeasurementParams, item: usize, level: u32, delta: f64) -> f64 {
    meas.items.get(item).map_or(0.0, |i| i.probability(level, delta))
}

/// Marginal log-likelihood of `theta` for the subdimension model.
pub fn log_likelihood(spec: &JlpmSpec, data: &CohortDataset, theta: &[f64]) -> Result<f64> {
    let (_, engine) = build_engine(spec, data)?;
    engine.checked_loglik(theta)
}

/// Per-patient marginal log-likelihood contributions, keyed by patient id.
pub fn log_likelihood_contributions(spec: &JlpmSpec, data: &CohortDataset, theta: &[f64]) -> Result<Vec<(String, f64)>> {
    let (_, engine) = build_engine(spec, data)?;
    let c = engine.contributions(theta)?;
    Ok(engine.patient_ids().into_iter().map(String::from).zip(c).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JlpmFit {
    pub spec: JlpmSpec,
    pub items: Vec<ItemDef>,
    pub fit: LatentFit,
}

impl JlpmFit {
    pub fn converged(&self) -> bool {
        self.fit.convergence.converged
    }

    pub fn measurement(&self) -> MeasurementParams {
        measurement_from(&self.fit, &self.items, &self.fit.theta)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    /// Fit record at known parameters: `theta` is zero except for the item
    /// measurement blocks.
    pub fn with_measurement(spec: &JlpmSpec, meas: &MeasurementParams) -> Result<JlpmFit> {
        let items: Vec<ItemDef> = meas
            .items
            .iter()
            .map(|i| ItemDef { id: i.id.clone(), max_level: i.max_level() })
            .collect();
        let lspec = spec.latent_spec(&items);
        let layout = crate::model::Layout::new(&lspec)?;
        let mut theta = vec![0.0; layout.len];
        for (i, r) in meas.items.iter().zip(&layout.outcomes) {
            if !(i.sd > 0.0) {
                return Err(Error::domain(format!("item {} needs a positive error SD", i.id)));
            }
            let raw = crate::model::thresholds_to_raw(&i.thresholds)?;
            theta[r.start..r.start + raw.len()].copy_from_slice(&raw);
            theta[r.end - 1] = i.sd.ln();
        }
        Ok(JlpmFit { spec: spec.clone(), items, fit: LatentFit::at(&lspec, theta)? })
    }
}

fn measurement_from(fit: &LatentFit, items: &[ItemDef], theta: &[f64]) -> MeasurementParams {
    let layout = crate::model::Layout::new(&fit.spec).expect("fitted spec is valid");
    MeasurementParams {
        items: items
            .iter()
            .zip(&layout.outcomes)
            .map(|(i, r)| {
                let raw = &theta[r.clone()];
                let m = i.max_level as usize;
                ItemMeasurement { id: i.id.clone(), thresholds: thresholds_from_raw(&raw[..m]), sd: raw[m].exp() }
            })
            .collect(),
    }
}

/// Fit the joint model of the subdimension items and the event causes.
///
/// A non-converged fit is returned with its flags set.
pub fn fit(spec: &JlpmSpec, data: &CohortDataset, start: Option<Vec<f64>>) -> Result<JlpmFit> {
    let (items, engine) = build_engine(spec, data)?;
    let fit = fit_latent(&engine, start)?;
    Ok(JlpmFit { spec: spec.clone(), items, fit })
}

/// Expected item levels over time for a covariate profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub items: Vec<String>,
    /// `expected[k][j]` is item `k` at `times[j]`.
    pub expected: Vec<Vec<f64>>,
    /// Optional 95% parametric-bootstrap bands, same layout.
    pub lower: Option<Vec<Vec<f64>>>,
    pub upper: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv_writer();
        let banded = self.lower.is_some();
        let mut header = vec!["item", "time", "expected"];
        if banded {
            header.extend(["lower", "upper"]);
        }
        w.write_record(&header).map_err(csv_err)?;
        for (k, id) in self.items.iter().enumerate() {
            for (j, t) in self.times.iter().enumerate() {
                let mut row = vec![id.clone(), fmt_f64(*t), fmt_f64(self.expected[k][j])];
                if let (Some(lo), Some(hi)) = (&self.lower, &self.upper) {
                    row.push(fmt_f64(lo[k][j]));
                    row.push(fmt_f64(hi[k][j]));
                }
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        csv_bytes(w)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Validation(format!("csv: {e}"))
}

fn expected_levels(
    fit: &JlpmFit,
    theta: &[f64],
    rows: &[(Vec<f64>, Vec<f64>)],
    nodes: &crate::numerics::sobol::NormalPoints,
) -> Vec<Vec<f64>> {
    let spec = &fit.fit.spec;
    let layout = crate::model::Layout::new(spec).expect("fitted spec is valid");
    let nre = spec.random.len();
    let l = layout.cholesky(theta, nre);
    let beta = &theta[layout.beta.clone()];
    let meas = measurement_from(&fit.fit, &fit.items, theta);
    let mut out = vec![vec![0.0; rows.len()]; meas.items.len()];
    let mut b = vec![0.0; nre];
    for u in nodes.iter() {
        for r in 0..nre {
            b[r] = (0..=r).map(|k| l[r * nre + k] * u[k]).sum();
        }
        for (j, (x, z)) in rows.iter().enumerate() {
            let delta: f64 =
                x.iter().zip(beta).map(|(a, c)| a * c).sum::<f64>() + z.iter().zip(&b).map(|(a, c)| a * c).sum::<f64>();
            for (k, item) in meas.items.iter().enumerate() {
                out[k][j] += item.expected_level(delta);
            }
        }
    }
    let n = nodes.len() as f64;
    out.iter_mut().flat_map(|v| v.iter_mut()).for_each(|v| *v /= n);
    out
}

fn design_rows(fit: &JlpmFit, profile: &BTreeMap<String, f64>, times: &[f64]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let spec = &fit.fit.spec;
    let (lo, hi) = spec.time.basis.boundary();
    times
        .iter()
        .map(|&t| {
            if !(t >= lo && t <= hi) {
                return Err(Error::domain(format!("time {t} outside the fitted time range [{lo}, {hi}]")));
            }
            let x = spec.time.row(t, profile)?;
            let z = spec.random.row(&x[..spec.time.n_time()]);
            Ok((x, z))
        })
        .collect()
}

/// `E[Y^k(t)]` integrated over the random effects with `mc_draws` centered
/// Sobol points.
pub fn predict_item_trajectory(
    fit: &JlpmFit,
    profile: &BTreeMap<String, f64>,
    times: &[f64],
    mc_draws: usize,
) -> Result<Trajectory> {
    let rows = design_rows(fit, profile, times)?;
    let nodes = sobol_normal_centered(fit.fit.spec.random.len(), mc_draws)?;
    Ok(Trajectory {
        times: times.to_vec(),
        items: fit.items.iter().map(|i| i.id.clone()).collect(),
        expected: expected_levels(fit, &fit.fit.theta, &rows, &nodes),
        lower: None,
        upper: None,
    })
}

/// Trajectory with 95% bands from `n_boot` parameter draws from
/// `N(theta_hat, V_hat)`.
pub fn predict_item_trajectory_bands(
    fit: &JlpmFit,
    profile: &BTreeMap<String, f64>,
    times: &[f64],
    mc_draws: usize,
    n_boot: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut traj = predict_item_trajectory(fit, profile, times, mc_draws)?;
    let v = fit
        .fit
        .vcov_matrix()
        .ok_or_else(|| Error::validation("bands need a variance matrix, which is unavailable for this fit"))?;
    if n_boot < 2 {
        return Err(Error::domain("at least two bootstrap draws are required"));
    }
    let chol = v
        .cholesky()
        .ok_or_else(|| Error::validation("variance matrix is not positive definite"))?
        .l();
    let rows = design_rows(fit, profile, times)?;
    let nodes = sobol_normal_centered(fit.fit.spec.random.len(), mc_draws)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = fit.fit.theta.len();
    let mut draws: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let z = nalgebra::DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
        let shift = &chol * z;
        let theta: Vec<f64> = fit.fit.theta.iter().zip(shift.iter()).map(|(a, b)| a + b).collect();
        draws.push(expected_levels(fit, &theta, &rows, &nodes));
    }
    let q = |k: usize, j: usize, prob: f64| {
        let mut v: Vec<f64> = draws.iter().map(|d| d[k][j]).collect();
        v.sort_by(f64::total_cmp);
        let pos = prob * (v.len() - 1) as f64;
        let (i, f) = (pos.floor() as usize, pos.fract());
        if i + 1 < v.len() {
            v[i] * (1.0 - f) + v[i + 1] * f
        } else {
            v[i]
        }
    };
    let nk = traj.items.len();
    traj.lower = Some((0..nk).map(|k| (0..times.len()).map(|j| q(k, j, 0.025)).collect()).collect());
    traj.upper = Some((0..nk).map(|k| (0..times.len()).map(|j| q(k, j, 0.975)).collect()).collect());
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub item: String,
    pub from: u32,
    pub to: u32,
    pub location: f64,
    pub se: Option<f64>,
}

/// Item level transitions ordered along the latent continuum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentSequence {
    pub transitions: Vec<Transition>,
}

impl ImpairmentSequence {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv_writer();
        w.write_record(["item", "from", "to", "location", "se"]).map_err(csv_err)?;
        for t in &self.transitions {
            w.write_record([
                t.item.clone(),
                t.from.to_string(),
                t.to.to_string(),
                fmt_f64(t.location),
                t.se.map(fmt_f64).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        csv_bytes(w)
    }
}

/// Every threshold `delta_{k,m+1}` (transition `m -> m+1`) with its Wald SE,
/// sorted by location; ties keep item order.
pub fn impairment_sequence(fit: &JlpmFit) -> ImpairmentSequence {
    let meas = fit.measurement();
    let mut transitions = Vec::new();
    for item in &meas.items {
        for (m, &loc) in item.thresholds.iter().enumerate() {
            let name = format!("{} threshold{}", item.id, m + 1);
            let se = fit.fit.natural.iter().find(|e| e.name == name).and_then(|e| e.se);
            transitions.push(Transition { item: item.id.clone(), from: m as u32, to: m as u32 + 1, location: loc, se });
        }
    }
    transitions.sort_by(|a, b| a.location.total_cmp(&b.location));
    ImpairmentSequence { transitions }
}
