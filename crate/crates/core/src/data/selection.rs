//! Step-specific analysis samples and prorated sum-scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CohortDataset, ScaleDefinition, Subdimension, Visit};
use crate::error::{Error, Result};

/// Share of subdimension items that must be observed for a staging visit.
const STAGING_MIN_OBSERVED: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Sequencing,
    Staging,
}

/// Counts removed by each selection rule, applied in the listed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub step: Step,
    pub patients_in: usize,
    pub visits_in: usize,
    pub patients_out: usize,
    pub visits_out: usize,
    pub removed: BTreeMap<String, usize>,
}

/// Sum of the observed levels of `dim`, rescaled by the maximum attainable
/// score over the observed items. Missing when the fraction of missing items
/// exceeds `max_missing_frac`.
pub fn prorated_sum_score(
    visit: &Visit,
    scale: &ScaleDefinition,
    dim: &Subdimension,
    max_missing_frac: f64,
) -> Result<Option<f64>> {
    if dim.items.is_empty() {
        return Err(Error::domain(format!("subdimension {} has no items", dim.name)));
    }
    if !(0.0..1.0).contains(&max_missing_frac) {
        return Err(Error::domain(format!(
            "max_missing_frac {max_missing_frac} outside [0, 1)"
        )));
    }
    let idx = scale.indices(dim)?;
    Ok(prorate(visit, scale, &idx, max_missing_frac))
}

pub(crate) fn prorate(visit: &Visit, scale: &ScaleDefinition, idx: &[usize], max_missing_frac: f64) -> Option<f64> {
    let mut sum = 0u64;
    let mut observed_max = 0u64;
    let mut total_max = 0u64;
    let mut missing = 0usize;
    for &k in idx {
        let m = scale.items[k].max_level as u64;
        total_max += m;
        match visit.responses[k] {
            Some(l) => {
                sum += l as u64;
                observed_max += m;
            }
            None => missing += 1,
        }
    }
    if missing as f64 / idx.len() as f64 > max_missing_frac || observed_max == 0 {
        return None;
    }
    if missing == 0 {
        return Some(sum as f64);
    }
    Some(sum as f64 * total_max as f64 / observed_max as f64)
}

fn observed_fraction(visit: &Visit, idx: &[usize]) -> f64 {
    let n = idx.iter().filter(|&&k| visit.responses[k].is_some()).count();
    n as f64 / idx.len() as f64
}

/// Filter `data` to the analysis sample of `step`.
///
/// Sequencing keeps patients with complete covariates and visits with at
/// least one observed item in every subdimension. Staging also requires an
/// observed stage and at least 75% observed items per subdimension. Patients
/// left without visits are removed.
pub fn select_step_sample(
    data: &CohortDataset,
    step: Step,
    dims: &[Subdimension],
) -> Result<(CohortDataset, SelectionReport)> {
    if dims.is_empty() {
        return Err(Error::domain("at least one subdimension is required"));
    }
    let idx: Vec<Vec<usize>> = dims
        .iter()
        .map(|d| {
            if d.items.is_empty() {
                Err(Error::domain(format!("subdimension {} has no items", d.name)))
            } else {
                data.scale.indices(d)
            }
        })
        .collect::<Result<_>>()?;

    let mut removed: BTreeMap<String, usize> = BTreeMap::new();
    let mut count = |rule: &str, n: usize| *removed.entry(rule.to_string()).or_default() += n;
    let mut patients = Vec::with_capacity(data.patients.len());
    for p in &data.patients {
        if p.covariates.values().any(Option::is_none) {
            count("patients_incomplete_covariates", 1);
            count("visits_of_removed_patients", p.visits.len());
            continue;
        }
        let mut q = p.clone();
        q.visits.retain(|v| {
            if !idx.iter().all(|ix| observed_fraction(v, ix) > 0.0) {
                count("visits_missing_subdimension", 1);
                return false;
            }
            if step == Step::Staging {
                if v.stage.is_none() {
                    count("visits_missing_stage", 1);
                    return false;
                }
                if !idx.iter().all(|ix| observed_fraction(v, ix) >= STAGING_MIN_OBSERVED) {
                    count("visits_insufficient_items", 1);
                    return false;
                }
            }
            true
        });
        if q.visits.is_empty() {
            count("patients_without_visits", 1);
            continue;
        }
        patients.push(q);
    }
    let out = CohortDataset {
        scale: data.scale.clone(),
        patients,
        n_stages: data.n_stages,
        n_causes: data.n_causes,
    };
    if out.patients.is_empty() {
        return Err(Error::EmptySample(format!("{step:?}").to_lowercase()));
    }
    let report = SelectionReport {
        step,
        patients_in: data.patients.len(),
        visits_in: data.n_visits(),
        patients_out: out.patients.len(),
        visits_out: out.n_visits(),
        removed,
    };
    Ok((out, report))
}
