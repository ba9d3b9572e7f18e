//! Increasing monotonicity of item responses along the rest-score.

use serde::{Deserialize, Serialize};

use super::ReplicateSample;
use crate::data::{ScaleDefinition, Subdimension};
use crate::error::{Error, Result};
use crate::sequencing::csv_err;
use crate::util::{csv_bytes, csv_writer, fmt_f64};

/// Largest tolerated decrease of the mean level between adjacent bins.
pub const MONOTONICITY_TOLERANCE: f64 = 0.05;
pub const DECILES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// 1-based decile of the rest-score; empty deciles are skipped.
    pub decile: usize,
    pub n: usize,
    pub mean_level: f64,
    /// `P(Y >= m)` for `m = 1..=M`.
    pub p_at_least: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemCurve {
    pub item: String,
    pub points: Vec<CurvePoint>,
    /// Largest decrease between adjacent bins (0 when nondecreasing).
    pub max_decrease: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityResult {
    pub subdimension: String,
    pub curves: Vec<ItemCurve>,
    pub warnings: Vec<String>,
}

impl MonotonicityResult {
    pub fn passed(&self) -> bool {
        self.curves.iter().all(|c| c.passed)
    }

    /// Long format: one row per item and bin, `p_ge_m` columns padded to the
    /// largest item.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let width = self.curves.iter().flat_map(|c| c.points.first()).map(|p| p.p_at_least.len()).max().unwrap_or(0);
        let mut w = csv_writer();
        let mut header = vec!["item".to_string(), "decile".into(), "n".into(), "mean_level".into()];
        header.extend((1..=width).map(|m| format!("p_ge_{m}")));
        w.write_record(&header).map_err(csv_err)?;
        for c in &self.curves {
            for p in &c.points {
                let mut row = vec![c.item.clone(), p.decile.to_string(), p.n.to_string(), fmt_f64(p.mean_level)];
                row.extend((0..width).map(|m| p.p_at_least.get(m).map(|v| fmt_f64(*v)).unwrap_or_default()));
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        csv_bytes(w)
    }
}

/// Decile of each value (0-based). Cut points are the empirical 10%, 20%, ...
/// quantiles; a value equal to a cut point goes to the lower bin.
pub fn decile_bins(values: &[f64]) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let cuts: Vec<f64> = (1..DECILES).map(|k| sorted[((k * n).div_ceil(DECILES)).max(1) - 1]).collect();
    values.iter().map(|v| cuts.iter().filter(|&&c| *v > c).count()).collect()
}

/// Curves of every item of `dim` over deciles of its rest-score (sum of the
/// other items). Only visits with all items of `dim` observed are used.
pub fn monotonicity_curves(
    sample: &ReplicateSample,
    scale: &ScaleDefinition,
    dim: &Subdimension,
    tolerance: f64,
) -> Result<MonotonicityResult> {
    if dim.items.len() < 2 {
        return Err(Error::validation(format!("subdimension {} needs at least two items", dim.name)));
    }
    let cols = scale.indices(dim)?;
    let rows: Vec<Vec<u32>> = sample
        .responses
        .iter()
        .filter_map(|r| cols.iter().map(|&k| r[k]).collect::<Option<Vec<u32>>>())
        .collect();
    if rows.is_empty() {
        return Err(Error::validation(format!("no complete responses for {}", dim.name)));
    }
    let mut warnings = Vec::new();
    let mut curves = Vec::with_capacity(cols.len());
    for (j, &k) in cols.iter().enumerate() {
        let max = scale.items[k].max_level as usize;
        let rest: Vec<f64> = rows.iter().map(|r| r.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, v)| *v as f64).sum()).collect();
        let bins = decile_bins(&rest);
        let mut n = [0usize; DECILES];
        let mut sum = [0.0f64; DECILES];
        let mut ge = vec![vec![0usize; max]; DECILES];
        for (r, &b) in rows.iter().zip(&bins) {
            n[b] += 1;
            sum[b] += r[j] as f64;
            for m in 1..=r[j] as usize {
                ge[b][m - 1] += 1;
            }
        }
        let points: Vec<CurvePoint> = (0..DECILES)
            .filter(|&b| n[b] > 0)
            .map(|b| CurvePoint {
                decile: b + 1,
                n: n[b],
                mean_level: sum[b] / n[b] as f64,
                p_at_least: ge[b].iter().map(|&c| c as f64 / n[b] as f64).collect(),
            })
            .collect();
        if points.len() < DECILES {
            warnings.push(format!("item {}: only {} distinct rest-score bins", scale.items[k].id, points.len()));
        }
        let max_decrease = points.windows(2).map(|w| w[0].mean_level - w[1].mean_level).fold(0.0, f64::max);
        curves.push(ItemCurve { item: scale.items[k].id.clone(), points, max_decrease, passed: max_decrease <= tolerance });
    }
    Ok(MonotonicityResult { subdimension: dim.name.clone(), curves, warnings })
}
