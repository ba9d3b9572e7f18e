//! Joint model of clinical stages and the prorated sum-score, sum-score
//! equivalents of stage transitions and their projection onto a
//! subdimension continuum.

use serde::{Deserialize, Serialize};

use crate::data::{prorate, CohortDataset, Subdimension};
use crate::error::{Error, Result};
use crate::model::{
    fit_latent, link_inverse, Engine, HazardSpec, LatentFit, LatentModelSpec, LatentPatient, LatentVisit, Layout,
    LinkSpec, OutcomeSpec, RandomEffects, TimeDesign, DEFAULT_QMC_POINTS,
};
use crate::numerics::optim::OptimizerSettings;
use crate::numerics::roots::{brent_root, expand_bracket};
use crate::numerics::sobol::sobol_normal_centered;
use crate::numerics::splines::SplineBasis;
use crate::sequencing::{csv_err, ImpairmentSequence, JlpmFit};
use crate::util::{csv_bytes, csv_writer, fmt_f64};

/// Interior knots of the default I-spline link.
const LINK_KNOTS: usize = 5;
pub const DEFAULT_MC_DRAWS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagingSpec {
    pub subdimension: Subdimension,
    pub time: TimeDesign,
    #[serde(default)]
    pub random: RandomEffects,
    /// Link of the sum-score; defaults to a quadratic I-spline on
    /// `[0, max score]` with 5 equally spaced knots inside the observed range.
    #[serde(default)]
    pub link: Option<LinkSpec>,
    pub hazards: Vec<HazardSpec>,
    #[serde(default = "default_qmc")]
    pub qmc_points: usize,
    #[serde(default = "default_quad")]
    pub quadrature_nodes: usize,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default = "default_missing")]
    pub max_missing_frac: f64,
}

fn default_qmc() -> usize {
    DEFAULT_QMC_POINTS
}

fn default_quad() -> usize {
    15
}

fn default_missing() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagingFit {
    /// Specification with the resolved link.
    pub spec: StagingSpec,
    pub n_stages: u32,
    /// Stages observed in the data; absent stages are merged.
    pub present_stages: Vec<u32>,
    pub warnings: Vec<String>,
    pub fit: LatentFit,
}

/// Model input for staging: outcome 0 is the stage, outcome 1 the sum-score.
struct StagingInput {
    spec: LatentModelSpec,
    link: LinkSpec,
    present: Vec<u32>,
    warnings: Vec<String>,
    patients: Vec<LatentPatient>,
}

fn prepare(spec: &StagingSpec, data: &CohortDataset) -> Result<StagingInput> {
    if !spec.time.covariates.is_empty() || !spec.time.time_interactions.is_empty() {
        return Err(Error::validation("the staging model takes no covariates in the latent trajectory"));
    }
    if !(0.0..1.0).contains(&spec.max_missing_frac) {
        return Err(Error::domain("max_missing_frac must lie in [0, 1)"));
    }
    let idx = data.scale.indices(&spec.subdimension)?;
    if idx.is_empty() {
        return Err(Error::validation(format!("subdimension {} has no items", spec.subdimension.name)));
    }
    let max_score: f64 = idx.iter().map(|&k| data.scale.items[k].max_level as f64).sum();

    let mut seen = vec![false; data.n_stages as usize + 1];
    let mut scores = Vec::new();
    let mut rows = Vec::with_capacity(data.patients.len());
    for p in &data.patients {
        let mut visits = Vec::with_capacity(p.visits.len());
        for v in &p.visits {
            let score = prorate(v, &data.scale, &idx, spec.max_missing_frac);
            if let Some(s) = v.stage {
                seen[s as usize] = true;
            }
            if let Some(y) = score {
                scores.push(y);
            }
            visits.push((v.time, v.stage, score));
        }
        rows.push((p, visits));
    }
    let present: Vec<u32> = (1..=data.n_stages).filter(|&s| seen[s as usize]).collect();
    if present.len() < 2 {
        return Err(Error::validation("at least two distinct stages must be observed"));
    }
    let mut warnings = Vec::new();
    for s in 1..=data.n_stages {
        if !seen[s as usize] {
            let w = format!("stage {s} is never observed; its thresholds are merged");
            log::warn!("{w}");
            warnings.push(w);
        }
    }

    let link = match &spec.link {
        Some(l) => {
            l.validate()?;
            l.clone()
        }
        None => default_link(&scores, max_score)?,
    };

    let time_spec = LatentModelSpec {
        time: spec.time.clone(),
        random: spec.random.clone(),
        outcomes: vec![
            OutcomeSpec::Ordinal { name: "stage".into(), max_level: present.len() as u32 - 1 },
            OutcomeSpec::Curvilinear { name: spec.subdimension.name.clone(), link: link.clone() },
        ],
        hazards: spec.hazards.clone(),
        qmc_points: spec.qmc_points,
        quadrature_nodes: spec.quadrature_nodes,
        optimizer: spec.optimizer.clone(),
    };
    let needed = time_spec.required_covariates();
    let patients = rows
        .into_iter()
        .map(|(p, visits)| {
            let mut covariates = std::collections::BTreeMap::new();
            for c in &needed {
                let v = p
                    .covariate(c)
                    .ok_or_else(|| Error::validation(format!("patient {}: covariate {c} is missing", p.id)))?;
                covariates.insert(c.clone(), v);
            }
            Ok(LatentPatient {
                id: p.id.clone(),
                covariates,
                visits: visits
                    .into_iter()
                    .map(|(time, stage, score)| LatentVisit {
                        time,
                        values: vec![
                            stage.map(|s| present.iter().position(|&q| q == s).expect("observed stage") as f64),
                            score,
                        ],
                    })
                    .collect(),
                event_time: p.event_time,
                event_cause: p.event_cause,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StagingInput { spec: time_spec, link, present, warnings, patients })
}

/// Quadratic I-spline on `[0, max_score]` with knots equally spaced strictly
/// inside the observed score range.
pub fn default_link(scores: &[f64], max_score: f64) -> Result<LinkSpec> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::validation("sum-scores are constant; the link cannot be estimated"));
    }
    let step = (hi - lo) / (LINK_KNOTS + 1) as f64;
    let knots = (1..=LINK_KNOTS).map(|j| lo + step * j as f64).collect();
    Ok(LinkSpec::ISpline { basis: SplineBasis::quadratic_ispline((0.0, max_score), knots)? })
}

fn engine_for(spec: &StagingSpec, data: &CohortDataset) -> Result<(StagingInput, Engine)> {
    let input = prepare(spec, data)?;
    let engine = Engine::new(&input.spec, &input.patients)?;
    Ok((input, engine))
}

/// Marginal log-likelihood of the staging model at `theta`.
pub fn staging_log_likelihood(spec: &StagingSpec, data: &CohortDataset, theta: &[f64]) -> Result<f64> {
    let (_, engine) = engine_for(spec, data)?;
    engine.checked_loglik(theta)
}

/// Fit the joint model of stages, sum-score and events.
pub fn fit_staging(spec: &StagingSpec, data: &CohortDataset) -> Result<StagingFit> {
    let (input, engine) = engine_for(spec, data)?;
    let fit = fit_latent(&engine, None)?;
    let mut resolved = spec.clone();
    resolved.link = Some(input.link);
    Ok(StagingFit {
        spec: resolved,
        n_stages: data.n_stages,
        present_stages: input.present,
        warnings: input.warnings,
        fit,
    })
}

impl StagingFit {
    /// Fit record at known parameters (other blocks zero); `spec.link` must
    /// be set.
    pub fn with_parameters(
        spec: &StagingSpec,
        n_stages: u32,
        present_stages: Vec<u32>,
        thresholds: &[f64],
        stage_sd: f64,
        link_raw: &[f64],
        score_sd: f64,
    ) -> Result<StagingFit> {
        let link = spec.link.clone().ok_or_else(|| Error::validation("staging parameters need an explicit link"))?;
        if present_stages.len() != thresholds.len() + 1 || link_raw.len() != link.len() + 1 {
            return Err(Error::validation("parameter lengths do not match the stages and link"));
        }
        let lspec = LatentModelSpec {
            time: spec.time.clone(),
            random: spec.random.clone(),
            outcomes: vec![
                OutcomeSpec::Ordinal { name: "stage".into(), max_level: thresholds.len() as u32 },
                OutcomeSpec::Curvilinear { name: spec.subdimension.name.clone(), link },
            ],
            hazards: spec.hazards.clone(),
            qmc_points: spec.qmc_points,
            quadrature_nodes: spec.quadrature_nodes,
            optimizer: spec.optimizer.clone(),
        };
        let layout = Layout::new(&lspec)?;
        let mut theta = vec![0.0; layout.len];
        let r0 = layout.outcomes[0].clone();
        theta[r0.start..r0.end - 1].copy_from_slice(&crate::model::thresholds_to_raw(thresholds)?);
        theta[r0.end - 1] = stage_sd.ln();
        let r1 = layout.outcomes[1].clone();
        theta[r1.start..r1.end - 1].copy_from_slice(link_raw);
        theta[r1.end - 1] = score_sd.ln();
        Ok(StagingFit {
            spec: spec.clone(),
            n_stages,
            present_stages,
            warnings: vec![],
            fit: LatentFit::at(&lspec, theta)?,
        })
    }

    pub fn converged(&self) -> bool {
        self.fit.convergence.converged
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.fit.spec).expect("fitted spec is valid")
    }

    /// Thresholds of the present stages (length `present - 1`).
    pub fn present_thresholds(&self) -> Vec<f64> {
        let l = self.layout();
        let raw = &self.fit.theta[l.outcomes[0].clone()];
        crate::model::thresholds_from_raw(&raw[..raw.len() - 1])
    }

    pub fn stage_sd(&self) -> f64 {
        let l = self.layout();
        self.fit.theta[l.outcomes[0].end - 1].exp()
    }

    /// `omega_s` for transitions `s-1 -> s`, `s = 2..=S`; stages below the
    /// lowest observed one give `-inf`, above the highest `+inf`.
    pub fn omega(&self) -> Vec<f64> {
        let thr = self.present_thresholds();
        let n = self.present_stages.len();
        (2..=self.n_stages)
            .map(|s| {
                let c = self.present_stages.iter().filter(|&&q| q < s).count();
                if c == 0 {
                    f64::NEG_INFINITY
                } else if c == n {
                    f64::INFINITY
                } else {
                    thr[c - 1]
                }
            })
            .collect()
    }

    pub fn link(&self) -> &LinkSpec {
        self.spec.link.as_ref().expect("resolved at fit time")
    }

    /// Raw link coefficients `(c0, c_1, ..)`.
    pub fn link_raw(&self) -> Vec<f64> {
        let l = self.layout();
        let r = l.outcomes[1].clone();
        self.fit.theta[r.start..r.end - 1].to_vec()
    }

    pub fn score_sd(&self) -> f64 {
        let l = self.layout();
        self.fit.theta[l.outcomes[1].end - 1].exp()
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SumScoreEquivalent {
    pub stage: u32,
    pub omega: f64,
    pub value: f64,
    /// Share of draws that fell outside the link range and were clamped.
    pub clamp_rate: f64,
}

/// `E[H^-1(omega_s + e)]`, `e ~ N(0, sd^2)`, over `mc_draws` fixed normal
/// points.
pub fn stage_sum_score_equivalent(fit: &StagingFit, s: u32, mc_draws: usize) -> Result<SumScoreEquivalent> {
    if s < 2 || s > fit.n_stages {
        return Err(Error::domain(format!("stage {s} outside 2..={}", fit.n_stages)));
    }
    let omega = fit.omega()[s as usize - 2];
    if !omega.is_finite() {
        return Err(Error::domain(format!("transition to stage {s} is not identified (stage merged)")));
    }
    let (value, clamp_rate) = score_equivalent(fit.link(), &fit.link_raw(), fit.score_sd(), omega, mc_draws)?;
    if clamp_rate > 0.0 {
        log::warn!("stage {s}: {:.1}% of draws clamped to the score range", 100.0 * clamp_rate);
    }
    Ok(SumScoreEquivalent { stage: s, omega, value, clamp_rate })
}

pub(crate) fn score_equivalent(link: &LinkSpec, raw: &[f64], sd: f64, omega: f64, mc_draws: usize) -> Result<(f64, f64)> {
    let nodes = sobol_normal_centered(1, mc_draws)?;
    let mut sum = 0.0;
    let mut clamped = 0usize;
    for u in nodes.iter() {
        let (y, c) = link_inverse(link, raw, omega + sd * u[0]);
        sum += y;
        clamped += c as usize;
    }
    let n = nodes.len() as f64;
    Ok((sum / n, clamped as f64 / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTransition {
    /// Transition `stage - 1 -> stage`.
    pub stage: u32,
    pub omega: Option<f64>,
    pub equivalent: Option<f64>,
    /// Location on the subdimension continuum; `None` for merged extreme
    /// stages (infinite).
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageProjection {
    pub subdimension: String,
    pub transitions: Vec<StageTransition>,
}

impl StageProjection {
    pub fn n_stages(&self) -> u32 {
        self.transitions.len() as u32 + 1
    }

    /// `[-inf, delta_2, .., delta_S, +inf]`; a missing location before the
    /// first finite one is `-inf`, after it `+inf`.
    pub fn bounds(&self) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY];
        let mut seen_finite = false;
        for t in &self.transitions {
            match t.delta {
                Some(d) => {
                    seen_finite = true;
                    out.push(d);
                }
                None => out.push(if seen_finite { f64::INFINITY } else { f64::NEG_INFINITY }),
            }
        }
        out.push(f64::INFINITY);
        out
    }

    /// Stage whose latent interval contains `delta`.
    pub fn stage_of(&self, delta: f64) -> u32 {
        let b = self.bounds();
        (1..b.len()).find(|&s| delta < b[s]).unwrap_or(b.len() - 1) as u32
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }
}

/// Solve `E[sum_k Y^k | latent = delta] = target` for each target; targets
/// correspond to stages `2, 3, ..`.
pub fn project_stage_thresholds(seq_fit: &JlpmFit, equivalents: &[f64]) -> Result<StageProjection> {
    let meas = seq_fit.measurement();
    let max = meas.max_sum();
    let transitions = equivalents
        .iter()
        .enumerate()
        .map(|(i, &target)| {
            let stage = i + 2;
            if !(target > 0.0 && target < max) {
                return Err(Error::OutOfRange { stage, target, max });
            }
            let delta = solve_expected_sum(&meas, target)?;
            Ok(StageTransition { stage: stage as u32, omega: None, equivalent: Some(target), delta: Some(delta) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StageProjection { subdimension: seq_fit.spec.subdimension.name.clone(), transitions })
}

pub(crate) fn solve_expected_sum(meas: &crate::sequencing::MeasurementParams, target: f64) -> Result<f64> {
    let f = |d: f64| meas.expected_sum(d) - target;
    let (a, b) = expand_bracket(f, -20.0, 20.0, 60)?;
    brent_root(f, a, b, 1e-13)
}

/// Sum-score equivalents of every identified transition and their
/// projection; merged extreme stages map to infinite locations.
pub fn project_staging(seq_fit: &JlpmFit, stg_fit: &StagingFit, mc_draws: usize) -> Result<StageProjection> {
    let meas = seq_fit.measurement();
    let max = meas.max_sum();
    let link_max = stg_fit.link().range().1;
    if (link_max - max).abs() > 1e-9 * max.max(1.0) {
        return Err(Error::validation(format!(
            "staging score range {link_max} does not match the sequencing items' maximum {max}"
        )));
    }
    let omega = stg_fit.omega();
    let transitions = omega
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let stage = i as u32 + 2;
            if !w.is_finite() {
                return Ok(StageTransition { stage, omega: None, equivalent: None, delta: None });
            }
            let eq = stage_sum_score_equivalent(stg_fit, stage, mc_draws)?;
            if !(eq.value > 0.0 && eq.value < max) {
                return Err(Error::OutOfRange { stage: stage as usize, target: eq.value, max });
            }
            let delta = solve_expected_sum(&meas, eq.value)?;
            Ok(StageTransition { stage, omega: Some(w), equivalent: Some(eq.value), delta: Some(delta) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StageProjection { subdimension: seq_fit.spec.subdimension.name.clone(), transitions })
}

/// Impairment sequence with the stage band of each transition, followed by
/// the stage transitions themselves, for sequence-with-stages figures.
pub fn sequence_with_stages_csv(seq: &ImpairmentSequence, proj: &StageProjection) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record(["kind", "item", "from", "to", "location", "se", "stage"]).map_err(csv_err)?;
    for t in &seq.transitions {
        w.write_record([
            "item".to_string(),
            t.item.clone(),
            t.from.to_string(),
            t.to.to_string(),
            fmt_f64(t.location),
            t.se.map(fmt_f64).unwrap_or_default(),
            proj.stage_of(t.location).to_string(),
        ])
        .map_err(csv_err)?;
    }
    for t in &proj.transitions {
        w.write_record([
            "stage".to_string(),
            String::new(),
            (t.stage - 1).to_string(),
            t.stage.to_string(),
            t.delta.map(fmt_f64).unwrap_or_default(),
            String::new(),
            t.stage.to_string(),
        ])
        .map_err(csv_err)?;
    }
    csv_bytes(w)
}

#[cfg(test)]
mod tests;
