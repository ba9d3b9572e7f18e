//! Exploratory (principal components, varimax) and confirmatory (unweighted
//! least squares) factor analysis of a correlation matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::polychoric::PolychoricMatrix;
use crate::data::ScaleStructure;
use crate::error::{Error, Result};
use crate::numerics::optim::{marquardt_levenberg, LocalModel, Objective, OptimizerSettings};

/// Items load on a factor only from this absolute loading up.
pub const LOADING_CUTOFF: f64 = 0.3;
/// Eigenvalues count for the Kaiser rule only above `1 + KAISER_MARGIN`, so
/// rounding of unit eigenvalues does not create factors.
const KAISER_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfaResult {
    pub items: Vec<String>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub n_factors: usize,
    /// Items x factors, after rotation.
    pub loadings: Vec<Vec<f64>>,
    /// Factor of the largest absolute loading, when it reaches the cutoff.
    pub assignment: Vec<Option<usize>>,
    pub warnings: Vec<String>,
}

impl EfaResult {
    /// Items grouped by assigned factor; factors without items are omitted.
    pub fn groups(&self) -> Vec<(usize, Vec<String>)> {
        (0..self.n_factors)
            .map(|f| {
                let items = self
                    .items
                    .iter()
                    .zip(&self.assignment)
                    .filter(|(_, a)| **a == Some(f))
                    .map(|(i, _)| i.clone())
                    .collect::<Vec<_>>();
                (f, items)
            })
            .filter(|(_, v)| !v.is_empty())
            .collect()
    }
}

/// Varimax rotation with Kaiser row normalization, by sweeps of planar
/// rotations at the closed-form optimal angle. Unlike the polar-factor
/// iteration this does not stall at symmetric starting points.
pub fn varimax(loadings: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, k) = loadings.shape();
    if k < 2 {
        return loadings.clone();
    }
    let pf = p as f64;
    let h: Vec<f64> = (0..p).map(|i| loadings.row(i).norm()).collect();
    let mut x = DMatrix::from_fn(p, k, |i, j| if h[i] > 0.0 { loadings[(i, j)] / h[i] } else { 0.0 });
    for _ in 0..500 {
        let mut largest = 0.0f64;
        for a in 0..k {
            for b in a + 1..k {
                let (mut sa, mut sb, mut sc, mut sd) = (0.0, 0.0, 0.0, 0.0);
                for i in 0..p {
                    let (xa, xb) = (x[(i, a)], x[(i, b)]);
                    let u = xa * xa - xb * xb;
                    let v = 2.0 * xa * xb;
                    sa += u;
                    sb += v;
                    sc += u * u - v * v;
                    sd += 2.0 * u * v;
                }
                let phi = (sd - 2.0 * sa * sb / pf).atan2(sc - (sa * sa - sb * sb) / pf) / 4.0;
                let (sin, cos) = phi.sin_cos();
                for i in 0..p {
                    let (xa, xb) = (x[(i, a)], x[(i, b)]);
                    x[(i, a)] = xa * cos + xb * sin;
                    x[(i, b)] = -xa * sin + xb * cos;
                }
                largest = largest.max(phi.abs());
            }
        }
        if largest < 1e-12 {
            break;
        }
    }
    DMatrix::from_fn(p, k, |i, j| x[(i, j)] * h[i])
}

/// How the number of factors is chosen when it is not fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FactorRule {
    /// Eigenvalues greater than 1.
    #[default]
    Kaiser,
    /// Elbow of the scree plot: the factors before the eigenvalue with the
    /// largest second difference.
    Scree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfaOptions {
    pub n_factors: Option<usize>,
    pub rule: FactorRule,
    pub loading_cutoff: f64,
}

impl Default for EfaOptions {
    fn default() -> Self {
        EfaOptions { n_factors: None, rule: FactorRule::Kaiser, loading_cutoff: LOADING_CUTOFF }
    }
}

fn scree_count(values: &[f64]) -> usize {
    // acceleration factor
    (1..values.len().saturating_sub(1))
        .map(|j| (j, values[j - 1] - 2.0 * values[j] + values[j + 1]))
        .fold(None, |best: Option<(usize, f64)>, (j, a)| match best {
            Some((_, b)) if b >= a => best,
            _ => Some((j, a)),
        })
        .map_or(1, |(j, _)| j.max(1))
}

/// Principal-component extraction and varimax rotation.
pub fn efa(items: &[String], corr: &DMatrix<f64>, opts: &EfaOptions) -> Result<EfaResult> {
    let p = items.len();
    if corr.shape() != (p, p) || p == 0 {
        return Err(Error::validation("correlation matrix does not match the item list"));
    }
    let mut warnings = Vec::new();
    let eig = SymmetricEigen::new(corr.clone());
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut values: Vec<f64> = order.iter().map(|&j| eig.eigenvalues[j]).collect();
    if values.iter().any(|&v| v < 0.0) {
        warnings.push("negative eigenvalues clipped to 0".into());
        values.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    let k = match (opts.n_factors, opts.rule) {
        (Some(k), _) if k == 0 || k > p => {
            return Err(Error::validation(format!("number of factors must be in 1..={p}")));
        }
        (Some(k), _) => k,
        (None, FactorRule::Scree) => scree_count(&values),
        (None, FactorRule::Kaiser) => {
            let k = values.iter().take_while(|&&v| v > 1.0 + KAISER_MARGIN).count();
            if k == 0 {
                warnings.push("no eigenvalue exceeds 1; one factor retained".into());
                1
            } else {
                k
            }
        }
    };
    let raw = DMatrix::from_fn(p, k, |i, j| eig.eigenvectors[(i, order[j])] * values[j].sqrt());
    let mut rotated = varimax(&raw);
    // sign and order conventions: positive column sums, largest factor first
    for j in 0..k {
        if rotated.column(j).sum() < 0.0 {
            rotated.column_mut(j).neg_mut();
        }
    }
    let mut forder: Vec<usize> = (0..k).collect();
    let ss: Vec<f64> = (0..k).map(|j| rotated.column(j).norm_squared()).collect();
    forder.sort_by(|&a, &b| ss[b].total_cmp(&ss[a]));
    let loadings: Vec<Vec<f64>> = (0..p).map(|i| forder.iter().map(|&j| rotated[(i, j)]).collect()).collect();
    let assignment = loadings
        .iter()
        .map(|row| {
            let (f, v) = row
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |b, (j, v)| if v.abs() > b.1 { (j, v.abs()) } else { b });
            (v >= opts.loading_cutoff).then_some(f)
        })
        .collect();
    Ok(EfaResult { items: items.to_vec(), eigenvalues: values, n_factors: k, loadings, assignment, warnings })
}

/// EFA of a polychoric matrix.
pub fn efa_polychoric(poly: &PolychoricMatrix, opts: &EfaOptions) -> Result<EfaResult> {
    efa(&poly.items, &poly.to_dmatrix(), opts)
}

/// Conventional cutoffs for good fit.
pub const CFI_MIN: f64 = 0.95;
pub const TLI_MIN: f64 = 0.95;
pub const RMSEA_MAX: f64 = 0.06;
pub const SRMR_MAX: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitChecks {
    pub cfi: bool,
    pub tli: bool,
    pub rmsea: bool,
    pub srmr: bool,
}

impl FitChecks {
    pub fn all(&self) -> bool {
        self.cfi && self.tli && self.rmsea && self.srmr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfaFit {
    pub items: Vec<String>,
    pub factors: Vec<String>,
    /// One loading per item on its own factor.
    pub loadings: Vec<f64>,
    pub factor_correlations: Vec<Vec<f64>>,
    pub f_min: f64,
    pub statistic: f64,
    pub df: f64,
    pub null_statistic: f64,
    pub null_df: f64,
    pub cfi: f64,
    pub tli: f64,
    pub rmsea: f64,
    pub srmr: f64,
    /// Observed minus implied correlations.
    pub residual: Vec<Vec<f64>>,
    pub converged: bool,
    pub checks: FitChecks,
}

struct Uls<'a> {
    s: &'a DMatrix<f64>,
    factor_of: Vec<usize>,
    m: usize,
    /// `(a, b)` factor pair of each correlation parameter.
    pairs: Vec<(usize, usize)>,
}

impl Uls<'_> {
    fn p(&self) -> usize {
        self.factor_of.len()
    }

    fn phi(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut phi = DMatrix::identity(self.m, self.m);
        for (k, &(a, b)) in self.pairs.iter().enumerate() {
            let v = theta[self.p() + k].tanh();
            phi[(a, b)] = v;
            phi[(b, a)] = v;
        }
        phi
    }

    fn implied(&self, theta: &[f64]) -> DMatrix<f64> {
        let p = self.p();
        let phi = self.phi(theta);
        DMatrix::from_fn(p, p, |i, j| {
            if i == j {
                1.0
            } else {
                theta[i] * theta[j] * phi[(self.factor_of[i], self.factor_of[j])]
            }
        })
    }

    fn pair_index(&self, a: usize, b: usize) -> Option<usize> {
        let key = (a.min(b), a.max(b));
        self.pairs.iter().position(|&x| x == key)
    }
}

impl Objective for Uls<'_> {
    fn value(&self, theta: &[f64]) -> f64 {
        let sig = self.implied(theta);
        let p = self.p();
        let mut f = 0.0;
        for i in 0..p {
            for j in i + 1..p {
                f += (self.s[(i, j)] - sig[(i, j)]).powi(2);
            }
        }
        -f
    }

    fn local_model(&self, theta: &[f64]) -> Option<LocalModel> {
        let p = self.p();
        let q = theta.len();
        let phi = self.phi(theta);
        let mut grad = vec![0.0; q];
        let mut info = DMatrix::zeros(q, q);
        let mut value = 0.0;
        let mut d = vec![0.0; q];
        for i in 0..p {
            for j in i + 1..p {
                let (fi, fj) = (self.factor_of[i], self.factor_of[j]);
                let ph = phi[(fi, fj)];
                let r = self.s[(i, j)] - theta[i] * theta[j] * ph;
                value -= r * r;
                d.iter_mut().for_each(|x| *x = 0.0);
                d[i] = theta[j] * ph;
                d[j] = theta[i] * ph;
                if fi != fj {
                    let k = self.pair_index(fi, fj).expect("factor pair");
                    d[p + k] = theta[i] * theta[j] * (1.0 - ph * ph);
                }
                for a in 0..q {
                    if d[a] == 0.0 {
                        continue;
                    }
                    grad[a] += 2.0 * r * d[a];
                    for b in 0..q {
                        info[(a, b)] += 2.0 * d[a] * d[b];
                    }
                }
            }
        }
        Some(LocalModel { value, gradient: grad, information: info })
    }
}

fn cfa_settings() -> OptimizerSettings {
    OptimizerSettings {
        max_iterations: 500,
        param_tolerance: 1e-12,
        objective_tolerance: 1e-14,
        rdm_tolerance: 1e-10,
        fd_step_scale: 1.0,
    }
}

/// Correlated-factor model with one loading per item, fitted by unweighted
/// least squares to `corr` (sample size `n`).
pub fn cfa_fit_matrix(items: &[String], corr: &DMatrix<f64>, n: usize, structure: &ScaleStructure) -> Result<CfaFit> {
    let mut sel = Vec::new();
    let mut factor_of = Vec::new();
    for (f, d) in structure.subdimensions.iter().enumerate() {
        for id in &d.items {
            let k = items
                .iter()
                .position(|x| x == id)
                .ok_or_else(|| Error::validation(format!("item {id} is not in the correlation matrix")))?;
            sel.push(k);
            factor_of.push(f);
        }
    }
    let p = sel.len();
    let m = structure.subdimensions.len();
    if p < 2 || m == 0 {
        return Err(Error::validation("confirmatory model needs at least two items"));
    }
    if n < 2 {
        return Err(Error::validation("confirmatory model needs at least two observations"));
    }
    let s = DMatrix::from_fn(p, p, |i, j| corr[(sel[i], sel[j])]);
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).collect();
    let uls = Uls { s: &s, factor_of: factor_of.clone(), m, pairs: pairs.clone() };

    // start: loadings from within-factor correlations, factor correlations
    // from cross-factor ones
    let mut start = Vec::with_capacity(p + pairs.len());
    for i in 0..p {
        let same: Vec<f64> = (0..p).filter(|&j| j != i && factor_of[j] == factor_of[i]).map(|j| s[(i, j)].abs()).collect();
        let l = if same.is_empty() { 0.7 } else { (same.iter().sum::<f64>() / same.len() as f64).sqrt() };
        start.push(l.clamp(0.2, 0.95));
    }
    for &(a, b) in &pairs {
        let mut sum = 0.0;
        let mut cnt = 0.0;
        for i in 0..p {
            for j in 0..p {
                if factor_of[i] == a && factor_of[j] == b {
                    sum += s[(i, j)] / (start[i] * start[j]);
                    cnt += 1.0;
                }
            }
        }
        start.push((sum / cnt).clamp(-0.9, 0.9).atanh());
    }
    let res = marquardt_levenberg(&uls, &start, &cfa_settings())?;
    let mut theta = res.argmax.clone();
    // sign convention: positive loading sums per factor
    for f in 0..m {
        let sum: f64 = (0..p).filter(|&i| factor_of[i] == f).map(|i| theta[i]).sum();
        if sum < 0.0 {
            for i in (0..p).filter(|&i| factor_of[i] == f) {
                theta[i] = -theta[i];
            }
            for (k, &(a, b)) in pairs.iter().enumerate() {
                if a == f || b == f {
                    theta[p + k] = -theta[p + k];
                }
            }
        }
    }
    let sig = uls.implied(&theta);
    let resid = &s - &sig;
    let f_min = -res.value;
    let n1 = (n - 1) as f64;
    let t = n1 * f_min;
    let f0: f64 = (0..p).flat_map(|i| (i + 1..p).map(move |j| (i, j))).map(|(i, j)| s[(i, j)].powi(2)).sum();
    let t0 = n1 * f0;
    let pp = p as f64;
    let df0 = pp * (pp - 1.0) / 2.0;
    let df = df0 - pp - pairs.len() as f64;
    let denom = (t0 - df0).max(0.0);
    let cfi = if denom > 0.0 { 1.0 - (t - df).max(0.0) / denom } else { 1.0 };
    // capped at 1 like the CFI
    let tli = if df > 0.0 && t0 / df0 > 1.0 { ((t0 / df0 - t / df) / (t0 / df0 - 1.0)).min(1.0) } else { 1.0 };
    let rmsea = if df > 0.0 { ((t - df) / (df * n1)).max(0.0).sqrt() } else { 0.0 };
    let srmr = (resid.iter().map(|r| r * r).sum::<f64>() / 2.0 / (pp * (pp + 1.0) / 2.0)).sqrt();
    let phi = uls.phi(&theta);
    let ordered: Vec<String> = sel.iter().map(|&k| items[k].clone()).collect();
    Ok(CfaFit {
        items: ordered,
        factors: structure.subdimensions.iter().map(|d| d.name.clone()).collect(),
        loadings: theta[..p].to_vec(),
        factor_correlations: (0..m).map(|a| (0..m).map(|b| phi[(a, b)]).collect()).collect(),
        f_min,
        statistic: t,
        df,
        null_statistic: t0,
        null_df: df0,
        cfi,
        tli,
        rmsea,
        srmr,
        residual: (0..p).map(|i| (0..p).map(|j| resid[(i, j)]).collect()).collect(),
        converged: res.convergence.converged,
        checks: FitChecks { cfi: cfi > CFI_MIN, tli: tli > TLI_MIN, rmsea: rmsea < RMSEA_MAX, srmr: srmr < SRMR_MAX },
    })
}

/// CFA of a polychoric matrix.
pub fn cfa_fit(poly: &PolychoricMatrix, structure: &ScaleStructure) -> Result<CfaFit> {
    cfa_fit_matrix(&poly.items, &poly.to_dmatrix(), poly.n, structure)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualPair {
    pub a: String,
    pub b: String,
    pub residual: f64,
}

/// Item pairs whose residual correlation exceeds `threshold` in absolute value.
pub fn flag_residual_pairs(items: &[String], residual: &[Vec<f64>], threshold: f64) -> Vec<ResidualPair> {
    let mut out = Vec::new();
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let r = residual[i][j];
            if r.abs() > threshold {
                out.push(ResidualPair { a: items[i].clone(), b: items[j].clone(), residual: r });
            }
        }
    }
    out
}
