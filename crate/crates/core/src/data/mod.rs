//! Cohort data model: scale definition, patients, visits and events.

mod io;
mod selection;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{cohort_csv, load_cohort, save_cohort, CohortSchema};
pub(crate) use selection::prorate;
pub use selection::{prorated_sum_score, select_step_sample, SelectionReport, Step};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemDef {
    pub id: String,
    /// Highest level `M`; the item takes values `0..=M`.
    pub max_level: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleDefinition {
    pub items: Vec<ItemDef>,
}

impl ScaleDefinition {
    pub fn new(items: Vec<ItemDef>) -> Result<Self> {
        let scale = ScaleDefinition { items };
        scale.validate()?;
        Ok(scale)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for item in &self.items {
            if !seen.insert(item.id.as_str()) {
                return Err(Error::validation(format!("duplicate item id {}", item.id)));
            }
            if item.max_level < 1 {
                return Err(Error::validation(format!("item {} must have at least two levels", item.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|i| i.id == id)
    }

    /// Column indices of the items of `dim`, in the order listed by `dim`.
    pub fn indices(&self, dim: &Subdimension) -> Result<Vec<usize>> {
        dim.items
            .iter()
            .map(|id| {
                self.index_of(id)
                    .ok_or_else(|| Error::validation(format!("item {id} of {} is not in the scale", dim.name)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    /// Years since entry.
    pub time: f64,
    /// One entry per scale item, aligned with `ScaleDefinition::items`.
    pub responses: Vec<Option<u32>>,
    pub stage: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    /// Numeric covariates; `None` marks a missing value.
    pub covariates: BTreeMap<String, Option<f64>>,
    pub visits: Vec<Visit>,
    pub event_time: f64,
    /// 0 = censored, otherwise the cause of the first event.
    pub event_cause: u32,
}

impl PatientRecord {
    pub fn covariate(&self, name: &str) -> Option<f64> {
        self.covariates.get(name).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortDataset {
    pub scale: ScaleDefinition,
    pub patients: Vec<PatientRecord>,
    pub n_stages: u32,
    pub n_causes: u32,
}

impl CohortDataset {
    pub fn n_visits(&self) -> usize {
        self.patients.iter().map(|p| p.visits.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.scale.validate()?;
        if self.n_stages < 2 {
            return Err(Error::validation("at least two stages are required"));
        }
        if self.n_causes < 1 {
            return Err(Error::validation("at least one event cause is required"));
        }
        let mut ids = HashSet::new();
        let mut any_response = false;
        for p in &self.patients {
            if !ids.insert(p.id.as_str()) {
                return Err(Error::validation(format!("duplicate patient id {}", p.id)));
            }
            if !(p.event_time > 0.0) || !p.event_time.is_finite() {
                return Err(Error::validation(format!(
                    "patient {}: event time {} must be positive",
                    p.id, p.event_time
                )));
            }
            if p.event_cause > self.n_causes {
                return Err(Error::validation(format!(
                    "patient {}: event cause {} outside 0..={}",
                    p.id, p.event_cause, self.n_causes
                )));
            }
            for (name, v) in &p.covariates {
                if let Some(v) = v {
                    if !v.is_finite() {
                        return Err(Error::validation(format!("patient {}: covariate {name} is not finite", p.id)));
                    }
                }
            }
            let mut last = f64::NEG_INFINITY;
            for v in &p.visits {
                if !(v.time >= 0.0) || !v.time.is_finite() {
                    return Err(Error::validation(format!("patient {}: visit time {} is negative", p.id, v.time)));
                }
                if v.time <= last {
                    return Err(Error::validation(format!(
                        "patient {}: visit times must be strictly increasing ({} after {last})",
                        p.id, v.time
                    )));
                }
                last = v.time;
                if v.responses.len() != self.scale.len() {
                    return Err(Error::validation(format!(
                        "patient {}: visit at {} has {} responses for {} items",
                        p.id,
                        v.time,
                        v.responses.len(),
                        self.scale.len()
                    )));
                }
                for (item, r) in self.scale.items.iter().zip(&v.responses) {
                    if let Some(level) = r {
                        any_response = true;
                        if *level > item.max_level {
                            return Err(Error::validation(format!(
                                "patient {}: item {} level {level} outside 0..={}",
                                p.id, item.id, item.max_level
                            )));
                        }
                    }
                }
                if let Some(s) = v.stage {
                    if s < 1 || s > self.n_stages {
                        return Err(Error::validation(format!(
                            "patient {}: stage {s} outside 1..={}",
                            p.id, self.n_stages
                        )));
                    }
                }
            }
            if p.event_time < last {
                return Err(Error::validation(format!(
                    "patient {}: event time {} precedes the last visit at {last}",
                    p.id, p.event_time
                )));
            }
        }
        if !any_response {
            return Err(Error::validation("dataset has no observed item response"));
        }
        Ok(())
    }
}

/// A set of items measuring one latent trait.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subdimension {
    pub name: String,
    pub items: Vec<String>,
}

/// Partition of (a subset of) the scale items into disjoint subdimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ScaleStructure {
    pub subdimensions: Vec<Subdimension>,
}

impl ScaleStructure {
    pub fn validate(&self, scale: &ScaleDefinition) -> Result<()> {
        let mut seen = HashSet::new();
        let mut names = HashSet::new();
        for d in &self.subdimensions {
            if !names.insert(d.name.as_str()) {
                return Err(Error::validation(format!("duplicate subdimension name {}", d.name)));
            }
            if d.items.is_empty() {
                return Err(Error::validation(format!("subdimension {} has no items", d.name)));
            }
            for id in &d.items {
                if scale.index_of(id).is_none() {
                    return Err(Error::validation(format!("subdimension {}: unknown item {id}", d.name)));
                }
                if !seen.insert(id.as_str()) {
                    return Err(Error::validation(format!("item {id} assigned to more than one subdimension")));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Subdimension> {
        self.subdimensions.iter().find(|d| d.name == name)
    }
}
