//! Item Fisher information and its split over disease stages.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::normal::normal_pdf;
use crate::numerics::quadrature::{gauss_legendre, integrate_adaptive, GaussLegendre};
use crate::sequencing::{csv_err, ItemMeasurement, MeasurementParams};
use crate::staging::StageProjection;
use crate::util::{csv_bytes, csv_writer, fmt_f64};

/// Outer stages are open intervals; integrate them on `[-TRUNCATION, TRUNCATION]`.
pub const TRUNCATION: f64 = 12.0;
const PANEL_NODES: usize = 30;
const PANEL_TOL: f64 = 1e-14;
const TINY: f64 = 1e-300;

fn pdf_at(a: f64, thr: Option<&f64>, delta: f64) -> f64 {
    thr.map_or(0.0, |d| a * normal_pdf(a * (d - delta)))
}

/// `dP_m/dDelta` for level `m` of one item; zero at infinite `delta`.
pub fn level_derivative(item: &ItemMeasurement, m: usize, delta: f64) -> f64 {
    if !delta.is_finite() {
        return 0.0;
    }
    let a = item.discrimination();
    let lower = if m == 0 { 0.0 } else { pdf_at(a, item.thresholds.get(m - 1), delta) };
    lower - pdf_at(a, item.thresholds.get(m), delta)
}

fn info_terms(item: &ItemMeasurement, delta: f64, mut each: impl FnMut(usize, f64)) {
    for m in 0..=item.thresholds.len() {
        let p = item.probability(m as u32, delta);
        let d = level_derivative(item, m, delta);
        // both vanish together in the tails; the ratio goes to zero
        each(m, if p < TINY { 0.0 } else { d * d / p });
    }
}

fn item_info(item: &ItemMeasurement, delta: f64) -> f64 {
    let mut s = 0.0;
    info_terms(item, delta, |_, v| s += v);
    s
}

fn get(meas: &MeasurementParams, k: usize) -> Result<&ItemMeasurement> {
    meas.items
        .get(k)
        .ok_or_else(|| Error::validation(format!("item index {k} out of range ({} items)", meas.items.len())))
}

/// `I^k(Delta) = sum_m P'_m^2 / P_m`.
pub fn item_information(meas: &MeasurementParams, item: usize, delta: f64) -> Result<f64> {
    Ok(item_info(get(meas, item)?, delta))
}

/// Per-level boundary terms `P'_m(hi) - P'_m(lo)`; they sum to zero.
pub fn boundary_terms(meas: &MeasurementParams, item: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    let it = get(meas, item)?;
    Ok((0..=it.thresholds.len())
        .map(|m| level_derivative(it, m, hi) - level_derivative(it, m, lo))
        .collect())
}

fn truncate(x: f64) -> f64 {
    x.clamp(-TRUNCATION, TRUNCATION)
}

/// Latent interval of stage `s` after truncation of the open ends.
pub fn stage_interval(projection: &StageProjection, s: u32) -> Result<(f64, f64)> {
    let b = projection.bounds();
    if s == 0 || s as usize >= b.len() {
        return Err(Error::validation(format!("stage {s} outside 1..={}", b.len() - 1)));
    }
    Ok((truncate(b[s as usize - 1]), truncate(b[s as usize])))
}

/// Panels between `lo` and `hi`, split at the item thresholds inside.
fn panels(item: &ItemMeasurement, lo: f64, hi: f64) -> Vec<f64> {
    let mut cuts = vec![lo];
    cuts.extend(item.thresholds.iter().copied().filter(|&d| d > lo && d < hi));
    cuts.push(hi);
    cuts.dedup();
    cuts
}

fn integrate_panels(item: &ItemMeasurement, lo: f64, hi: f64, rule: &GaussLegendre, f: impl Fn(f64) -> f64) -> f64 {
    panels(item, lo, hi).windows(2).map(|w| integrate_adaptive(&f, w[0], w[1], rule, PANEL_TOL)).sum()
}

fn rule() -> GaussLegendre {
    gauss_legendre(PANEL_NODES, -1.0, 1.0).expect("fixed rule size")
}

fn two_term(item: &ItemMeasurement, lo: f64, hi: f64, rule: &GaussLegendre) -> f64 {
    (0..=item.thresholds.len())
        .map(|m| {
            let integral = integrate_panels(item, lo, hi, rule, |x| {
                let p = item.probability(m as u32, x);
                let d = level_derivative(item, m, x);
                if p < TINY {
                    0.0
                } else {
                    d * d / p
                }
            });
            integral - (level_derivative(item, m, hi) - level_derivative(item, m, lo))
        })
        .sum::<f64>()
        // the boundary terms cancel up to rounding
        .max(0.0)
}

/// Information item `item` carries over stage `s`, in the two-term form.
/// A degenerate interval gives zero.
pub fn stage_information(meas: &MeasurementParams, projection: &StageProjection, item: usize, s: u32) -> Result<f64> {
    let it = get(meas, item)?;
    let (lo, hi) = stage_interval(projection, s)?;
    if hi <= lo {
        return Ok(0.0);
    }
    Ok(two_term(it, lo, hi, &rule()))
}

/// Direct quadrature of `I^k` over `[lo, hi]`.
pub fn interval_information(meas: &MeasurementParams, item: usize, lo: f64, hi: f64) -> Result<f64> {
    let it = get(meas, item)?;
    let (lo, hi) = (truncate(lo), truncate(hi));
    if hi <= lo {
        return Ok(0.0);
    }
    Ok(integrate_panels(it, lo, hi, &rule(), |x| item_info(it, x)))
}

/// `int_{-12}^{12} I^k(Delta) dDelta`.
pub fn total_information(meas: &MeasurementParams, item: usize) -> Result<f64> {
    interval_information(meas, item, -TRUNCATION, TRUNCATION)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformationRow {
    pub rank: usize,
    pub item: String,
    pub info: f64,
    /// Percent of the stage total; null when the stage carries no information.
    pub share: Option<f64>,
    pub cumulative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageInformation {
    pub stage: u32,
    pub total: f64,
    pub informative: bool,
    pub rows: Vec<InformationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformationTable {
    pub subdimension: String,
    pub stages: Vec<StageInformation>,
    pub warnings: Vec<String>,
}

impl InformationTable {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv_writer();
        w.write_record(["stage", "rank", "item", "info", "share", "cumulative"]).map_err(csv_err)?;
        for st in &self.stages {
            for r in &st.rows {
                w.write_record([
                    st.stage.to_string(),
                    r.rank.to_string(),
                    r.item.clone(),
                    fmt_f64(r.info),
                    r.share.map(fmt_f64).unwrap_or_default(),
                    r.cumulative.map(fmt_f64).unwrap_or_default(),
                ])
                .map_err(csv_err)?;
            }
        }
        csv_bytes(w)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn stage(&self, s: u32) -> Option<&StageInformation> {
        self.stages.iter().find(|x| x.stage == s)
    }
}

/// Rank items within one stage by information; equal values keep item order.
pub fn rank_stage(stage: u32, items: &[String], info: &[f64]) -> Result<StageInformation> {
    if items.len() != info.len() {
        return Err(Error::validation(format!("{} items but {} information values", items.len(), info.len())));
    }
    if let Some(v) = info.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::domain(format!("invalid information value {v} at stage {stage}")));
    }
    let total: f64 = info.iter().sum();
    let informative = total > 0.0;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| info[b].total_cmp(&info[a]));
    let mut cum = 0.0;
    let rows = order
        .into_iter()
        .enumerate()
        .map(|(r, k)| {
            let share = informative.then(|| 100.0 * info[k] / total);
            if let Some(s) = share {
                cum += s;
            }
            InformationRow {
                rank: r + 1,
                item: items[k].clone(),
                info: info[k],
                share,
                cumulative: informative.then_some(cum),
            }
        })
        .collect();
    Ok(StageInformation { stage, total, informative, rows })
}

/// Build the ranking table from `info[stage index][item]`, stages numbered from 1.
pub fn rank_items(subdimension: &str, items: &[String], info: &[Vec<f64>]) -> Result<InformationTable> {
    let stages = info
        .iter()
        .enumerate()
        .map(|(s, v)| rank_stage(s as u32 + 1, items, v))
        .collect::<Result<Vec<_>>>()?;
    let warnings = stages
        .iter()
        .filter(|s| !s.informative)
        .map(|s| format!("stage {} carries no information; shares undefined", s.stage))
        .collect();
    Ok(InformationTable { subdimension: subdimension.to_string(), stages, warnings })
}

/// Stage-wise information of every item, ranked.
pub fn information_table(meas: &MeasurementParams, projection: &StageProjection) -> Result<InformationTable> {
    let n_stages = projection.n_stages();
    let n_items = meas.items.len();
    if n_items == 0 {
        return Err(Error::validation("no items to rank"));
    }
    let rule = rule();
    let mut degenerate = Vec::new();
    let mut intervals = Vec::with_capacity(n_stages as usize);
    for s in 1..=n_stages {
        let (lo, hi) = stage_interval(projection, s)?;
        if hi <= lo {
            degenerate.push(format!("stage {s} has an empty latent interval; information set to 0"));
        }
        intervals.push((lo, hi));
    }
    let cells: Vec<f64> = (0..n_stages as usize * n_items)
        .into_par_iter()
        .map(|c| {
            let (lo, hi) = intervals[c / n_items];
            if hi <= lo {
                0.0
            } else {
                two_term(&meas.items[c % n_items], lo, hi, &rule)
            }
        })
        .collect();
    let info: Vec<Vec<f64>> = cells.chunks(n_items).map(|c| c.to_vec()).collect();
    let ids: Vec<String> = meas.items.iter().map(|i| i.id.clone()).collect();
    let mut table = rank_items(&projection.subdimension, &ids, &info)?;
    degenerate.append(&mut table.warnings);
    table.warnings = degenerate;
    Ok(table)
}

#[cfg(test)]
mod tests;
