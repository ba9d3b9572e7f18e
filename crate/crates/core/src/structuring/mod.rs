//! Subdimension discovery on pseudo-independent replicates: one visit per
//! patient, polychoric EFA, CFA fit checks, residual correlations and
//! monotonicity, aggregated over replicates.

pub mod factor;
pub mod monotonicity;
pub mod polychoric;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CohortDataset, ScaleDefinition, ScaleStructure, Subdimension};
use crate::error::{Error, Result};
use factor::{cfa_fit, efa_polychoric, flag_residual_pairs, CfaFit, EfaOptions, EfaResult, FactorRule, ResidualPair};
use monotonicity::{monotonicity_curves, MonotonicityResult, MONOTONICITY_TOLERANCE};
use polychoric::polychoric_matrix;

pub use factor::LOADING_CUTOFF;

/// One visit per patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSample {
    pub index: usize,
    pub patient_ids: Vec<String>,
    pub visit_times: Vec<f64>,
    /// Rows are patients, columns the scale items.
    pub responses: Vec<Vec<Option<u32>>>,
}

/// Draw `r` samples, each with one visit per patient chosen uniformly.
/// Replicate `k` uses stream `k` of a generator seeded with `seed`.
pub fn resample_replicates(data: &CohortDataset, r: usize, seed: u64) -> Result<Vec<ReplicateSample>> {
    if r == 0 {
        return Err(Error::validation("at least one replicate is required"));
    }
    if let Some(p) = data.patients.iter().find(|p| p.visits.is_empty()) {
        return Err(Error::validation(format!("patient {} has no visit to sample", p.id)));
    }
    Ok((0..r)
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            let mut sample = ReplicateSample {
                index,
                patient_ids: Vec::with_capacity(data.patients.len()),
                visit_times: Vec::with_capacity(data.patients.len()),
                responses: Vec::with_capacity(data.patients.len()),
            };
            for p in &data.patients {
                let v = &p.visits[rng.gen_range(0..p.visits.len())];
                sample.patient_ids.push(p.id.clone());
                sample.visit_times.push(v.time);
                sample.responses.push(v.responses.clone());
            }
            sample
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructuringOptions {
    pub replicates: usize,
    pub seed: u64,
    pub n_factors: Option<usize>,
    pub factor_rule: FactorRule,
    pub loading_cutoff: f64,
    pub residual_threshold: f64,
    pub consistency: f64,
    pub monotonicity_tolerance: f64,
    /// Names and expected items of the subdimensions; replicate factors are
    /// matched to it. Without it the factors of a typical replicate are used.
    pub reference: Option<ScaleStructure>,
}

impl Default for StructuringOptions {
    fn default() -> Self {
        StructuringOptions {
            replicates: 50,
            seed: 1,
            n_factors: None,
            factor_rule: FactorRule::Kaiser,
            loading_cutoff: LOADING_CUTOFF,
            residual_threshold: 0.2,
            consistency: 0.8,
            monotonicity_tolerance: MONOTONICITY_TOLERANCE,
            reference: None,
        }
    }
}

impl StructuringOptions {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::validation("at least one replicate is required"));
        }
        if !(self.consistency > 0.0 && self.consistency <= 1.0) {
            return Err(Error::validation("consistency must be in (0, 1]"));
        }
        if !(self.loading_cutoff >= 0.0 && self.residual_threshold >= 0.0 && self.monotonicity_tolerance >= 0.0) {
            return Err(Error::validation("cutoffs and tolerances must be nonnegative"));
        }
        Ok(())
    }

    fn efa(&self) -> EfaOptions {
        EfaOptions { n_factors: self.n_factors, rule: self.factor_rule, loading_cutoff: self.loading_cutoff }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub index: usize,
    pub efa: Option<EfaResult>,
    pub cfa: Option<CfaFit>,
    pub flagged_pairs: Vec<ResidualPair>,
    /// Subdimension matched to each EFA factor.
    pub labels: Vec<Option<String>>,
    /// False when the replicate failed or the CFA did not converge.
    pub included: bool,
    pub error: Option<String>,
    pub warnings: Vec<String>,
}

/// EFA and CFA of one replicate. The CFA model is the replicate's own EFA
/// partition without singleton factors.
pub fn analyze_replicate(sample: &ReplicateSample, scale: &ScaleDefinition, opts: &StructuringOptions) -> ReplicateResult {
    let mut out = ReplicateResult {
        index: sample.index,
        efa: None,
        cfa: None,
        flagged_pairs: Vec::new(),
        labels: Vec::new(),
        included: false,
        error: None,
        warnings: Vec::new(),
    };
    let poly = match polychoric_matrix(sample, scale) {
        Ok(p) => p,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    out.warnings.extend(poly.warnings.iter().cloned());
    let efa = match efa_polychoric(&poly, &opts.efa()) {
        Ok(r) => r,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    out.warnings.extend(efa.warnings.iter().cloned());
    let structure = ScaleStructure {
        subdimensions: efa
            .groups()
            .into_iter()
            .filter(|(_, items)| items.len() >= 2)
            .map(|(f, items)| Subdimension { name: format!("F{}", f + 1), items })
            .collect(),
    };
    out.efa = Some(efa);
    if structure.subdimensions.is_empty() {
        out.error = Some("no factor with at least two items".into());
        return out;
    }
    match cfa_fit(&poly, &structure) {
        Ok(fit) => {
            out.flagged_pairs = flag_residual_pairs(&fit.items, &fit.residual, opts.residual_threshold);
            out.included = fit.converged;
            if !fit.converged {
                out.error = Some("confirmatory fit did not converge".into());
            }
            out.cfa = Some(fit);
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemCounts {
    pub item: String,
    /// Aligned with `StructuringReport::subdimensions`.
    pub counts: Vec<usize>,
    /// Below the loading cutoff, or excluded from the polychoric matrix.
    pub unassigned: usize,
    /// On a factor that matched no subdimension.
    pub unmatched: usize,
}

impl ItemCounts {
    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.unassigned + self.unmatched
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item: String,
    pub counts: Vec<usize>,
    /// Mean loading on each subdimension's factor, over the replicates where
    /// that factor was found; `None` if it never was.
    pub mean_loadings: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub a: String,
    pub b: String,
    pub mean_residual: f64,
    pub flagged: usize,
    /// Included replicates where both items entered the CFA.
    pub present: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMonotonicity {
    pub item: String,
    pub subdimension: String,
    pub passed: usize,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuringReport {
    pub n_replicates: usize,
    pub n_included: usize,
    pub subdimensions: Vec<String>,
    pub replicates: Vec<ReplicateResult>,
    /// Counts sum to `n_included` for every item.
    pub counts: Vec<ItemCounts>,
    pub residual_pairs: Vec<PairSummary>,
    pub structure: ScaleStructure,
    pub dropped: Vec<String>,
    pub needs_review: Vec<ReviewItem>,
    pub monotonicity: Vec<ItemMonotonicity>,
    /// Curves of the first replicate, per proposed subdimension.
    pub curves: Vec<MonotonicityResult>,
    pub warnings: Vec<String>,
}

impl StructuringReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    /// Share of included replicates whose CFA meets every cutoff.
    pub fn cfa_pass_rate(&self) -> f64 {
        let passed = self
            .replicates
            .iter()
            .filter(|r| r.included && r.cfa.as_ref().is_some_and(|c| c.checks.all()))
            .count();
        passed as f64 / self.n_included.max(1) as f64
    }

    /// Curve tables of all proposed subdimensions with a leading
    /// `subdimension` column.
    pub fn curves_csv(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (k, c) in self.curves.iter().enumerate() {
            let body = String::from_utf8(c.to_csv()?).map_err(|e| Error::validation(e.to_string()))?;
            for (i, line) in body.lines().enumerate() {
                if i == 0 {
                    if k == 0 {
                        out.extend_from_slice(format!("subdimension,{line}\n").as_bytes());
                    }
                    continue;
                }
                out.extend_from_slice(format!("{},{line}\n", c.subdimension).as_bytes());
            }
        }
        Ok(out)
    }
}

/// Reference partition: the given structure, or the EFA groups of the first
/// included replicate with the modal number of factors.
fn reference_groups(results: &[ReplicateResult], reference: Option<&ScaleStructure>) -> Vec<(String, Vec<String>)> {
    if let Some(r) = reference {
        return r.subdimensions.iter().map(|d| (d.name.clone(), d.items.clone())).collect();
    }
    let mut freq = BTreeMap::new();
    for r in results.iter().filter(|r| r.included) {
        if let Some(e) = &r.efa {
            *freq.entry(e.n_factors).or_insert(0usize) += 1;
        }
    }
    let Some(modal) = freq.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(k, _)| *k) else {
        return Vec::new();
    };
    let first = results
        .iter()
        .filter(|r| r.included)
        .find_map(|r| r.efa.as_ref().filter(|e| e.n_factors == modal))
        .expect("modal factor count comes from an included replicate");
    first.groups().into_iter().enumerate().map(|(k, (_, items))| (format!("F{}", k + 1), items)).collect()
}

/// Greedy matching of EFA factors to reference groups by item overlap.
fn align(efa: &EfaResult, reference: &[(String, Vec<String>)]) -> Vec<Option<String>> {
    let groups: Vec<Vec<&String>> = (0..efa.n_factors)
        .map(|f| efa.items.iter().zip(&efa.assignment).filter(|(_, a)| **a == Some(f)).map(|(i, _)| i).collect())
        .collect();
    let mut pairs = Vec::new();
    for (f, g) in groups.iter().enumerate() {
        for (d, (_, items)) in reference.iter().enumerate() {
            let overlap = g.iter().filter(|i| items.contains(i)).count();
            if overlap > 0 {
                pairs.push((overlap, f, d));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut labels = vec![None; efa.n_factors];
    let mut used = vec![false; reference.len()];
    for (_, f, d) in pairs {
        if labels[f].is_none() && !used[d] {
            labels[f] = Some(reference[d].0.clone());
            used[d] = true;
        }
    }
    labels
}

/// Align replicate factors, count assignments and propose a structure. Items
/// whose modal subdimension reaches `consistency` are assigned, items mostly
/// unassigned are dropped, and the rest are listed for review.
pub fn aggregate_structure(
    mut replicates: Vec<ReplicateResult>,
    scale: &ScaleDefinition,
    reference: Option<&ScaleStructure>,
    consistency: f64,
) -> Result<StructuringReport> {
    if replicates.is_empty() {
        return Err(Error::validation("no replicate to aggregate"));
    }
    let n_included = replicates.iter().filter(|r| r.included).count();
    if n_included == 0 {
        return Err(Error::domain("no replicate produced a converged factor model"));
    }
    let reference = reference_groups(&replicates, reference);
    let dims: Vec<String> = reference.iter().map(|(n, _)| n.clone()).collect();
    let nd = dims.len();
    let mut counts: Vec<ItemCounts> = scale
        .items
        .iter()
        .map(|i| ItemCounts { item: i.id.clone(), counts: vec![0; nd], unassigned: 0, unmatched: 0 })
        .collect();
    let mut load_sum = vec![vec![0.0; nd]; scale.len()];
    let mut load_n = vec![vec![0usize; nd]; scale.len()];
    let mut pairs: BTreeMap<(String, String), (f64, usize, usize)> = BTreeMap::new();
    for r in replicates.iter_mut().filter(|r| r.included) {
        let efa = r.efa.as_ref().expect("included replicates have an EFA");
        r.labels = align(efa, &reference);
        for (k, c) in counts.iter_mut().enumerate() {
            let Some(pos) = efa.items.iter().position(|i| *i == c.item) else {
                c.unassigned += 1;
                continue;
            };
            match efa.assignment[pos] {
                None => c.unassigned += 1,
                Some(f) => match &r.labels[f] {
                    Some(name) => c.counts[dims.iter().position(|d| d == name).expect("label")] += 1,
                    None => c.unmatched += 1,
                },
            }
            for (f, label) in r.labels.iter().enumerate() {
                if let Some(name) = label {
                    let d = dims.iter().position(|x| x == name).expect("label");
                    load_sum[k][d] += efa.loadings[pos][f];
                    load_n[k][d] += 1;
                }
            }
        }
        let cfa = r.cfa.as_ref().expect("included replicates have a CFA");
        for i in 0..cfa.items.len() {
            for j in i + 1..cfa.items.len() {
                let (a, b) = if cfa.items[i] <= cfa.items[j] { (i, j) } else { (j, i) };
                let e = pairs.entry((cfa.items[a].clone(), cfa.items[b].clone())).or_insert((0.0, 0, 0));
                let res = cfa.residual[i][j];
                e.0 += res;
                e.2 += 1;
                if r.flagged_pairs.iter().any(|p| p.a == cfa.items[i] && p.b == cfa.items[j]) {
                    e.1 += 1;
                }
            }
        }
    }
    let need = consistency * n_included as f64;
    let mut assigned: Vec<Vec<String>> = vec![Vec::new(); nd];
    let mut dropped = Vec::new();
    let mut needs_review = Vec::new();
    for (k, c) in counts.iter().enumerate() {
        let modal = (0..nd).max_by(|&a, &b| c.counts[a].cmp(&c.counts[b]).then(b.cmp(&a)));
        match modal {
            Some(d) if c.counts[d] as f64 >= need => assigned[d].push(c.item.clone()),
            _ if c.unassigned as f64 >= need => dropped.push(c.item.clone()),
            _ => needs_review.push(ReviewItem {
                item: c.item.clone(),
                counts: c.counts.clone(),
                mean_loadings: (0..nd).map(|d| (load_n[k][d] > 0).then(|| load_sum[k][d] / load_n[k][d] as f64)).collect(),
            }),
        }
    }
    let structure = ScaleStructure {
        subdimensions: dims
            .iter()
            .zip(assigned)
            .filter(|(_, items)| !items.is_empty())
            .map(|(name, items)| Subdimension { name: name.clone(), items })
            .collect(),
    };
    let residual_pairs = pairs
        .into_iter()
        .filter(|(_, v)| v.1 > 0)
        .map(|((a, b), (sum, flagged, present))| PairSummary { a, b, mean_residual: sum / present as f64, flagged, present })
        .collect();
    let mut warnings = Vec::new();
    let failed = replicates.len() - n_included;
    if failed > 0 {
        warnings.push(format!("{failed} replicate(s) excluded from aggregation"));
    }
    Ok(StructuringReport {
        n_replicates: replicates.len(),
        n_included,
        subdimensions: dims,
        replicates,
        counts,
        residual_pairs,
        structure,
        dropped,
        needs_review,
        monotonicity: Vec::new(),
        curves: Vec::new(),
        warnings,
    })
}

/// The whole structuring step: resample, analyze replicates in parallel,
/// aggregate, then check monotonicity of the proposed subdimensions on every
/// sample.
pub fn run_structuring(data: &CohortDataset, opts: &StructuringOptions) -> Result<StructuringReport> {
    opts.validate()?;
    if let Some(r) = &opts.reference {
        r.validate(&data.scale)?;
    }
    let samples = resample_replicates(data, opts.replicates, opts.seed)?;
    let results: Vec<ReplicateResult> = samples.par_iter().map(|s| analyze_replicate(s, &data.scale, opts)).collect();
    let mut report = aggregate_structure(results, &data.scale, opts.reference.as_ref(), opts.consistency)?;
    let dims: Vec<&Subdimension> = report.structure.subdimensions.iter().filter(|d| d.items.len() >= 2).collect();
    let per_sample: Vec<Vec<MonotonicityResult>> = samples
        .par_iter()
        .map(|s| dims.iter().filter_map(|d| monotonicity_curves(s, &data.scale, d, opts.monotonicity_tolerance).ok()).collect())
        .collect();
    let mut tally: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    for res in per_sample.iter().flatten() {
        for c in &res.curves {
            let e = tally.entry((res.subdimension.clone(), c.item.clone())).or_insert((0, 0));
            e.0 += usize::from(c.passed);
            e.1 += 1;
        }
    }
    report.monotonicity = dims
        .iter()
        .flat_map(|d| d.items.iter().map(move |i| (d.name.clone(), i.clone())))
        .map(|key| {
            let (passed, checked) = tally.get(&key).copied().unwrap_or((0, 0));
            ItemMonotonicity { item: key.1, subdimension: key.0, passed, checked }
        })
        .collect();
    report.curves = per_sample.into_iter().next().unwrap_or_default();
    Ok(report)
}
