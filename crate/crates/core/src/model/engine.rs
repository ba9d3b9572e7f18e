//! Marginal log-likelihood of the joint model and its analytic gradient.
//!
//! Random effects are integrated out with a fixed centered Sobol net. For each
//! patient the latent process is evaluated at a list of points (visits, the
//! event time and the quadrature nodes of current-value cumulative hazards),
//! and the derivative of the conditional log-likelihood with respect to the
//! process at each point is accumulated over the net with log-sum-exp
//! weights. Chain rules then map these posterior averages to the parameters.

use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::hazard::BaselineModel;
use super::outcome::thresholds_from_raw;
use super::{Association, Layout, LatentModelSpec, LatentPatient, OutcomeSpec};
use crate::error::{Error, Result};
use crate::numerics::normal::{normal_interval, normal_pdf, normal_quantile};
use crate::numerics::optim::{LocalModel, Objective};
use crate::numerics::quadrature::gauss_legendre;
use crate::numerics::sobol::{sobol_normal_centered, NormalPoints};

const PROB_FLOOR: f64 = 1e-300;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
/// Above this `|alpha|` the current-value rule uses twice the nodes.
const DENSE_ALPHA: f64 = 2.0;

#[derive(Debug, Clone)]
enum ObsKind {
    Level(usize),
    Score { y: f64, i: Vec<f64>, m: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Obs {
    point: usize,
    outcome: usize,
    kind: ObsKind,
}

#[derive(Debug, Clone)]
struct CauseDesign {
    w: Vec<f64>,
    integrals: Vec<f64>,
    /// Normal and dense quadrature rules: point range and weights.
    rules: [(Range<usize>, Vec<f64>); 2],
}

#[derive(Debug, Clone)]
struct PatientDesign {
    id: String,
    times: Vec<f64>,
    x: Vec<f64>,
    z: Vec<f64>,
    obs: Vec<Obs>,
    /// Visits plus the event time.
    n_base: usize,
    t_point: usize,
    event_time: f64,
    cause: usize,
    causes: Vec<CauseDesign>,
    /// Record offsets: per hazard block, random-effect score, total length.
    oh: Vec<usize>,
    osb: usize,
    rlen: usize,
}

enum OutParams<'a> {
    Ordinal { raw: &'a [f64], thr: Vec<f64>, sd: f64 },
    Curvilinear { raw: &'a [f64], sd: f64 },
}

struct HazParams<'a> {
    base: &'a [f64],
    gamma: &'a [f64],
    alpha: &'a [f64],
    assoc: Association,
    rule: usize,
}

struct Params<'a> {
    beta: &'a [f64],
    chol: Vec<f64>,
    outcomes: Vec<OutParams<'a>>,
    hazards: Vec<HazParams<'a>>,
}

#[derive(Default)]
struct HazScratch {
    lam0: f64,
    dlam0: Vec<f64>,
    c: Vec<f64>,
    dc: Vec<f64>,
    tmp: Vec<f64>,
}

#[derive(Default)]
struct Scratch {
    mu: Vec<f64>,
    delta: Vec<f64>,
    b: Vec<f64>,
    rec: Vec<f64>,
    acc: Vec<f64>,
    gb: Vec<f64>,
    hobs: Vec<f64>,
    haz: Vec<HazScratch>,
}

/// Likelihood evaluator for one model specification and data set.
#[derive(Debug, Clone)]
pub struct Engine {
    spec: LatentModelSpec,
    layout: Layout,
    nre: usize,
    pbeta: usize,
    nodes: NormalPoints,
    baselines: Vec<BaselineModel>,
    patients: Vec<PatientDesign>,
}

impl Engine {
    pub fn new(spec: &LatentModelSpec, patients: &[LatentPatient]) -> Result<Self> {
        spec.validate()?;
        if patients.is_empty() {
            return Err(Error::EmptySample("model input".into()));
        }
        let layout = Layout::new(spec)?;
        let baselines = spec
            .hazards
            .iter()
            .map(|h| BaselineModel::new(&h.baseline))
            .collect::<Result<Vec<_>>>()?;
        let nre = spec.random.len();
        let nodes = sobol_normal_centered(nre, spec.qmc_points)?;
        let mut engine = Engine {
            spec: spec.clone(),
            layout,
            nre,
            pbeta: spec.time.n_fixed(),
            nodes,
            baselines,
            patients: Vec::with_capacity(patients.len()),
        };
        for p in patients {
            let d = engine.design(p)?;
            engine.patients.push(d);
        }
        Ok(engine)
    }

    pub fn spec(&self) -> &LatentModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn n_observations(&self) -> usize {
        self.patients.iter().map(|p| p.obs.len()).sum()
    }

    /// Time-basis row at `t`.
    pub fn time_row(&self, t: f64) -> Vec<f64> {
        self.spec.time.basis.eval(t)
    }

    pub fn patient_ids(&self) -> Vec<&str> {
        self.patients.iter().map(|p| p.id.as_str()).collect()
    }

    fn design(&self, p: &LatentPatient) -> Result<PatientDesign> {
        let spec = &self.spec;
        let err = |m: String| Error::validation(format!("patient {}: {m}", p.id));
        if !(p.event_time > 0.0) || !p.event_time.is_finite() {
            return Err(err(format!("event time {} must be positive", p.event_time)));
        }
        if p.event_cause as usize > spec.hazards.len() {
            return Err(err(format!("event cause {} outside 0..={}", p.event_cause, spec.hazards.len())));
        }
        let mut times: Vec<f64> = p.visits.iter().map(|v| v.time).collect();
        times.push(p.event_time);
        let n_base = times.len();
        let t_end = p.event_time;

        let mut causes = Vec::with_capacity(spec.hazards.len());
        for (h, bm) in spec.hazards.iter().zip(&self.baselines) {
            let w = h
                .covariates
                .iter()
                .map(|c| p.covariates.get(c).copied().ok_or_else(|| err(format!("missing covariate {c}"))))
                .collect::<Result<Vec<_>>>()?;
            let integrals = if bm.is_linear_in_squares() { bm.basis_integrals(t_end) } else { vec![] };
            let mut rules: [(Range<usize>, Vec<f64>); 2] = [(0..0, vec![]), (0..0, vec![])];
            if h.association == Association::CurrentValue {
                let mut edges = vec![0.0];
                edges.extend(bm.breakpoints().into_iter().filter(|&b| b > 0.0 && b < t_end));
                edges.push(t_end);
                for (k, n) in [spec.quadrature_nodes, 2 * spec.quadrature_nodes].into_iter().enumerate() {
                    let gl = gauss_legendre(n, -1.0, 1.0)?;
                    let start = times.len();
                    let mut weights = Vec::new();
                    for e in edges.windows(2) {
                        let r = gl.mapped(e[0], e[1]);
                        times.extend(&r.nodes);
                        weights.extend(&r.weights);
                    }
                    rules[k] = (start..times.len(), weights);
                }
            }
            causes.push(CauseDesign { w, integrals, rules });
        }

        let mut x = Vec::with_capacity(times.len() * self.pbeta);
        let mut z = Vec::with_capacity(times.len() * self.nre);
        let nt = spec.time.n_time();
        for &t in &times {
            let row = spec.time.row(t, &p.covariates).map_err(|e| err(e.to_string()))?;
            z.extend(spec.random.row(&row[..nt]));
            x.extend(row);
        }

        let mut obs = Vec::new();
        for (vi, v) in p.visits.iter().enumerate() {
            if v.values.len() != spec.outcomes.len() {
                return Err(err(format!(
                    "visit at {} has {} values for {} outcomes",
                    v.time,
                    v.values.len(),
                    spec.outcomes.len()
                )));
            }
            for (oi, (o, val)) in spec.outcomes.iter().zip(&v.values).enumerate() {
                let Some(y) = *val else { continue };
                let kind = match o {
                    OutcomeSpec::Ordinal { name, max_level } => {
                        if !(y >= 0.0 && y <= *max_level as f64 && y.fract() == 0.0) {
                            return Err(err(format!("{name} level {y} outside 0..={max_level}")));
                        }
                        ObsKind::Level(y as usize)
                    }
                    OutcomeSpec::Curvilinear { name, link } => {
                        let (lo, hi) = link.range();
                        if !(y >= lo && y <= hi) {
                            return Err(err(format!("{name} value {y} outside [{lo}, {hi}]")));
                        }
                        let (i, m) = link.basis(y);
                        ObsKind::Score { y, i, m }
                    }
                };
                obs.push(Obs { point: vi, outcome: oi, kind });
            }
        }

        let np = times.len();
        let mut at = np + 3 * obs.len();
        let mut oh = Vec::new();
        for (hl, bm) in self.layout.hazards.iter().zip(&self.baselines) {
            oh.push(at);
            at += 1 + bm.n_params() + hl.alpha.len();
        }
        Ok(PatientDesign {
            id: p.id.clone(),
            times,
            x,
            z,
            obs,
            n_base,
            t_point: n_base - 1,
            event_time: t_end,
            cause: p.event_cause as usize,
            causes,
            oh,
            osb: at,
            rlen: at + self.nre,
        })
    }

    fn params<'a>(&self, theta: &'a [f64]) -> Params<'a> {
        let l = &self.layout;
        let outcomes = self
            .spec
            .outcomes
            .iter()
            .zip(&l.outcomes)
            .map(|(o, r)| {
                let raw = &theta[r.clone()];
                let sd = raw[raw.len() - 1].exp();
                match o {
                    OutcomeSpec::Ordinal { .. } => OutParams::Ordinal {
                        raw,
                        thr: thresholds_from_raw(&raw[..raw.len() - 1]),
                        sd,
                    },
                    OutcomeSpec::Curvilinear { .. } => OutParams::Curvilinear { raw, sd },
                }
            })
            .collect();
        let hazards = self
            .spec
            .hazards
            .iter()
            .zip(&l.hazards)
            .map(|(h, hl)| {
                let alpha = &theta[hl.alpha.clone()];
                let dense = h.association == Association::CurrentValue && alpha[0].abs() > DENSE_ALPHA;
                HazParams {
                    base: &theta[hl.base.clone()],
                    gamma: &theta[hl.gamma.clone()],
                    alpha,
                    assoc: h.association,
                    rule: dense as usize,
                }
            })
            .collect();
        Params {
            beta: &theta[l.beta.clone()],
            chol: l.cholesky(theta, self.nre),
            outcomes,
            hazards,
        }
    }

    /// Log-likelihood of one patient and, when `want_grad`, its score.
    fn eval_patient(&self, p: &PatientDesign, par: &Params, s: &mut Scratch, want_grad: bool) -> (f64, Vec<f64>) {
        let nre = self.nre;
        let pb = self.pbeta;
        let np = p.times.len();
        let layout = &self.layout;

        let mut active = vec![0..p.n_base];
        for (h, cd) in par.hazards.iter().zip(&p.causes) {
            if h.assoc == Association::CurrentValue {
                active.push(cd.rules[h.rule].0.clone());
            }
        }
        s.mu.resize(np, 0.0);
        s.delta.resize(np, 0.0);
        s.b.resize(nre, 0.0);
        for r in &active {
            for pt in r.clone() {
                s.mu[pt] = p.x[pt * pb..(pt + 1) * pb].iter().zip(par.beta).map(|(a, b)| a * b).sum();
            }
        }

        let mut grad = if want_grad { vec![0.0; layout.len] } else { Vec::new() };
        let mut fixed = 0.0;

        s.hobs.resize(p.obs.len(), 0.0);
        for (k, o) in p.obs.iter().enumerate() {
            if let (ObsKind::Score { i, m, .. }, OutParams::Curvilinear { raw, sd }) = (&o.kind, &par.outcomes[o.outcome]) {
                let c = &raw[1..raw.len() - 1];
                s.hobs[k] = raw[0] + c.iter().zip(i).map(|(c, v)| c * c * v).sum::<f64>();
                let hp: f64 = c.iter().zip(m).map(|(c, v)| c * c * v).sum::<f64>().max(PROB_FLOOR);
                fixed += hp.ln() - sd.ln() - LN_SQRT_2PI;
                if want_grad {
                    let r = &layout.outcomes[o.outcome];
                    for (j, (cj, mj)) in c.iter().zip(m).enumerate() {
                        grad[r.start + 1 + j] += 2.0 * cj * mj / hp;
                    }
                    grad[r.end - 1] -= 1.0;
                }
            }
        }

        s.haz.resize_with(par.hazards.len(), HazScratch::default);
        for (pi, (h, cd)) in par.hazards.iter().zip(&p.causes).enumerate() {
            let hl = &layout.hazards[pi];
            let bm = &self.baselines[pi];
            let nx = bm.n_params();
            let lp: f64 = cd.w.iter().zip(h.gamma).map(|(a, b)| a * b).sum();
            let ewp = lp.exp();
            let hs = &mut s.haz[pi];
            hs.tmp.resize(nx, 0.0);
            hs.dlam0.resize(nx, 0.0);
            if p.cause == pi + 1 {
                fixed += bm.log_hazard(p.event_time, h.base, &mut hs.tmp) + lp;
                if want_grad {
                    for j in 0..nx {
                        grad[hl.base.start + j] += hs.tmp[j];
                    }
                    for (j, w) in cd.w.iter().enumerate() {
                        grad[hl.gamma.start + j] += w;
                    }
                }
            }
            if h.assoc == Association::CurrentValue {
                let (range, weights) = &cd.rules[h.rule];
                hs.c.clear();
                hs.dc.clear();
                for (k, pt) in range.clone().enumerate() {
                    let l0 = bm.hazard(p.times[pt], h.base, Some(&mut hs.tmp));
                    hs.c.push(weights[k] * l0 * ewp);
                    let f = weights[k] * ewp;
                    for j in 0..nx {
                        hs.dc.push(hs.tmp[j] * f);
                    }
                }
            } else {
                hs.lam0 = bm.cumulative(p.event_time, h.base, &cd.integrals, &mut hs.dlam0) * ewp;
                hs.dlam0.iter_mut().for_each(|v| *v *= ewp);
            }
        }

        if want_grad {
            s.rec.resize(p.rlen, 0.0);
            s.acc.clear();
            s.acc.resize(p.rlen, 0.0);
            s.gb.clear();
            s.gb.resize(nre * nre, 0.0);
        }
        let mut lmax = f64::NEG_INFINITY;
        let mut wsum = 0.0;
        for q in 0..self.nodes.len() {
            let u = self.nodes.point(q);
            for r in 0..nre {
                s.b[r] = (0..=r).map(|k| par.chol[r * nre + k] * u[k]).sum();
            }
            for rg in &active {
                for pt in rg.clone() {
                    let zr = &p.z[pt * nre..(pt + 1) * nre];
                    s.delta[pt] = s.mu[pt] + zr.iter().zip(&s.b).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if want_grad {
                s.rec.iter_mut().for_each(|v| *v = 0.0);
            }
            let mut ll = 0.0;
            for (k, o) in p.obs.iter().enumerate() {
                let d = s.delta[o.point];
                match (&o.kind, &par.outcomes[o.outcome]) {
                    (ObsKind::Level(y), OutParams::Ordinal { thr, sd, .. }) => {
                        let y = *y;
                        let zl = if y == 0 { f64::NEG_INFINITY } else { (thr[y - 1] - d) / sd };
                        let zu = if y == thr.len() { f64::INFINITY } else { (thr[y] - d) / sd };
                        let pr = normal_interval(zl, zu).max(PROB_FLOOR);
                        ll += pr.ln();
                        if want_grad {
                            let (pl, tl) = if zl.is_finite() { let f = normal_pdf(zl); (f, zl * f) } else { (0.0, 0.0) };
                            let (pu, tu) = if zu.is_finite() { let f = normal_pdf(zu); (f, zu * f) } else { (0.0, 0.0) };
                            let sp = sd * pr;
                            s.rec[o.point] += (pl - pu) / sp;
                            s.rec[np + 3 * k] = pu / sp;
                            s.rec[np + 3 * k + 1] = -pl / sp;
                            s.rec[np + 3 * k + 2] = (tl - tu) / pr;
                        }
                    }
                    (ObsKind::Score { .. }, OutParams::Curvilinear { sd, .. }) => {
                        let r = (s.hobs[k] - d) / sd;
                        ll -= 0.5 * r * r;
                        if want_grad {
                            s.rec[o.point] += r / sd;
                            s.rec[np + 3 * k] = -r / sd;
                            s.rec[np + 3 * k + 2] = r * r;
                        }
                    }
                    _ => unreachable!("observation kind matches its outcome"),
                }
            }
            for (pi, h) in par.hazards.iter().enumerate() {
                let hs = &s.haz[pi];
                let nx = hs.dlam0.len();
                let ev = if p.cause == pi + 1 { 1.0 } else { 0.0 };
                let o = p.oh[pi];
                match h.assoc {
                    Association::None => {
                        ll -= hs.lam0;
                        if want_grad {
                            s.rec[o] = hs.lam0;
                            s.rec[o + 1..o + 1 + nx].copy_from_slice(&hs.dlam0);
                        }
                    }
                    Association::RandomEffects => {
                        let ab: f64 = h.alpha.iter().zip(&s.b).map(|(a, b)| a * b).sum();
                        let e = ab.exp();
                        let lam = hs.lam0 * e;
                        ll += ev * ab - lam;
                        if want_grad {
                            s.rec[o] = lam;
                            for j in 0..nx {
                                s.rec[o + 1 + j] = hs.dlam0[j] * e;
                            }
                            for r in 0..nre {
                                s.rec[o + 1 + nx + r] = (ev - lam) * s.b[r];
                                s.rec[p.osb + r] += (ev - lam) * h.alpha[r];
                            }
                        }
                    }
                    Association::CurrentValue => {
                        let a = h.alpha[0];
                        let mut lam = 0.0;
                        let range = p.causes[pi].rules[h.rule].0.clone();
                        for (k, pt) in range.enumerate() {
                            let dv = s.delta[pt];
                            let e = (a * dv).exp();
                            let ce = hs.c[k] * e;
                            lam += ce;
                            if want_grad {
                                s.rec[pt] -= a * ce;
                                s.rec[o + 1 + nx] -= ce * dv;
                                for j in 0..nx {
                                    s.rec[o + 1 + j] += hs.dc[k * nx + j] * e;
                                }
                            }
                        }
                        ll -= lam;
                        if ev > 0.0 {
                            let dt = s.delta[p.t_point];
                            ll += a * dt;
                            if want_grad {
                                s.rec[p.t_point] += a;
                                s.rec[o + 1 + nx] += dt;
                            }
                        }
                        if want_grad {
                            s.rec[o] = lam;
                        }
                    }
                }
            }
            if ll.is_nan() {
                return (f64::NAN, grad);
            }
            if ll == f64::NEG_INFINITY {
                continue;
            }
            if want_grad {
                for rg in &active {
                    for pt in rg.clone() {
                        let g = s.rec[pt];
                        if g != 0.0 {
                            for r in 0..nre {
                                s.rec[p.osb + r] += g * p.z[pt * nre + r];
                            }
                        }
                    }
                }
            }
            if ll > lmax {
                let scale = if lmax == f64::NEG_INFINITY { 0.0 } else { (lmax - ll).exp() };
                wsum *= scale;
                if want_grad {
                    s.acc.iter_mut().for_each(|v| *v *= scale);
                    s.gb.iter_mut().for_each(|v| *v *= scale);
                }
                lmax = ll;
            }
            let w = (ll - lmax).exp();
            wsum += w;
            if want_grad {
                for (a, r) in s.acc.iter_mut().zip(&s.rec) {
                    *a += w * r;
                }
                for r in 0..nre {
                    let sr = w * s.rec[p.osb + r];
                    for c in 0..=r {
                        s.gb[r * nre + c] += sr * u[c];
                    }
                }
            }
        }
        if wsum == 0.0 {
            return (f64::NEG_INFINITY, grad);
        }
        let total = fixed + lmax + (wsum / self.nodes.len() as f64).ln();
        if !want_grad {
            return (total, grad);
        }

        let acc = &mut s.acc;
        acc.iter_mut().for_each(|v| *v /= wsum);
        s.gb.iter_mut().for_each(|v| *v /= wsum);

        for rg in &active {
            for pt in rg.clone() {
                let g = acc[pt];
                if g != 0.0 {
                    for (j, xv) in p.x[pt * pb..(pt + 1) * pb].iter().enumerate() {
                        grad[layout.beta.start + j] += g * xv;
                    }
                }
            }
        }
        for (i, &(r, c)) in layout.chol_entries.iter().enumerate() {
            let v = s.gb[r * nre + c];
            grad[layout.chol.start + i] += if r == c { v * par.chol[r * nre + r] } else { v };
        }
        for (k, o) in p.obs.iter().enumerate() {
            let start = layout.outcomes[o.outcome].start;
            let (fu, fl, fs) = (acc[np + 3 * k], acc[np + 3 * k + 1], acc[np + 3 * k + 2]);
            match (&o.kind, &par.outcomes[o.outcome]) {
                (ObsKind::Level(y), OutParams::Ordinal { raw, thr, .. }) => {
                    let y = *y;
                    let mut add = |idx: usize, g: f64| {
                        grad[start] += g;
                        for i in 1..=idx {
                            grad[start + i] += 2.0 * raw[i] * g;
                        }
                    };
                    if y < thr.len() {
                        add(y, fu);
                    }
                    if y > 0 {
                        add(y - 1, fl);
                    }
                    grad[start + thr.len()] += fs;
                }
                (ObsKind::Score { i, .. }, OutParams::Curvilinear { raw, .. }) => {
                    grad[start] += fu;
                    for (j, iv) in i.iter().enumerate() {
                        grad[start + 1 + j] += fu * 2.0 * raw[1 + j] * iv;
                    }
                    grad[start + 1 + i.len()] += fs;
                }
                _ => unreachable!("observation kind matches its outcome"),
            }
        }
        for (pi, cd) in p.causes.iter().enumerate() {
            let hl = &layout.hazards[pi];
            let nx = hl.base.len();
            let o = p.oh[pi];
            for (j, w) in cd.w.iter().enumerate() {
                grad[hl.gamma.start + j] -= w * acc[o];
            }
            for j in 0..nx {
                grad[hl.base.start + j] -= acc[o + 1 + j];
            }
            for r in 0..hl.alpha.len() {
                grad[hl.alpha.start + r] += acc[o + 1 + nx + r];
            }
        }
        (total, grad)
    }

    fn check_len(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.layout.len {
            return Err(Error::validation(format!(
                "parameter vector has length {}, model needs {}",
                theta.len(),
                self.layout.len
            )));
        }
        Ok(())
    }

    /// Per-patient log-likelihood contributions.
    pub fn contributions(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_len(theta)?;
        let par = self.params(theta);
        Ok(self
            .patients
            .par_iter()
            .map_init(Scratch::default, |s, p| self.eval_patient(p, &par, s, false).0)
            .collect())
    }

    /// Total log-likelihood; NaN for an invalid parameter vector length.
    pub fn loglik(&self, theta: &[f64]) -> f64 {
        match self.contributions(theta) {
            Ok(c) => c.iter().sum(),
            Err(_) => f64::NAN,
        }
    }

    /// Total log-likelihood, failing with the first patient whose
    /// contribution is not finite.
    pub fn checked_loglik(&self, theta: &[f64]) -> Result<f64> {
        let c = self.contributions(theta)?;
        if let Some(i) = c.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { patient: self.patients[i].id.clone() });
        }
        Ok(c.iter().sum())
    }

    /// Per-patient scores (rows) and log-likelihood contributions.
    pub fn scores(&self, theta: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.check_len(theta)?;
        let par = self.params(theta);
        let out: Vec<(f64, Vec<f64>)> = self
            .patients
            .par_iter()
            .map_init(Scratch::default, |s, p| self.eval_patient(p, &par, s, true))
            .collect();
        Ok(out.into_iter().unzip())
    }

    /// Starting values from marginal summaries of the data.
    pub fn initial_theta(&self) -> Vec<f64> {
        let l = &self.layout;
        let mut theta = vec![0.0; l.len];
        for (oi, (o, r)) in self.spec.outcomes.iter().zip(&l.outcomes).enumerate() {
            let obs = self.patients.iter().flat_map(|p| p.obs.iter()).filter(|o| o.outcome == oi);
            match o {
                OutcomeSpec::Ordinal { max_level, .. } => {
                    let m = *max_level as usize;
                    let mut counts = vec![0.0; m + 1];
                    for ob in obs {
                        if let ObsKind::Level(y) = ob.kind {
                            counts[y] += 1.0;
                        }
                    }
                    let n: f64 = counts.iter().sum::<f64>().max(1.0);
                    let mut cum = 0.0;
                    let mut prev = f64::NEG_INFINITY;
                    let mut delta = Vec::with_capacity(m);
                    for c in &counts[..m] {
                        cum += c;
                        let p = (cum / n).clamp(1e-3, 1.0 - 1e-3);
                        let d = (std::f64::consts::SQRT_2 * normal_quantile(p)).max(prev + 0.1);
                        delta.push(d);
                        prev = d;
                    }
                    let raw = super::thresholds_to_raw(&delta).expect("increasing thresholds");
                    theta[r.start..r.start + m].copy_from_slice(&raw);
                }
                OutcomeSpec::Curvilinear { .. } => {
                    let pts: Vec<(f64, f64)> = obs
                        .filter_map(|ob| match &ob.kind {
                            ObsKind::Score { y, i, .. } => Some((*y, i.iter().sum::<f64>())),
                            _ => None,
                        })
                        .collect();
                    let k = r.len() - 2;
                    let (c0, slope) = link_start(&pts);
                    theta[r.start] = c0;
                    for j in 0..k {
                        theta[r.start + 1 + j] = slope.sqrt();
                    }
                }
            }
        }
        let exposure: f64 = self.patients.iter().map(|p| p.event_time).sum();
        for (pi, (hl, bm)) in l.hazards.iter().zip(&self.baselines).enumerate() {
            let events = self.patients.iter().filter(|p| p.cause == pi + 1).count() as f64;
            let rate = events.max(0.5) / exposure;
            if bm.is_linear_in_squares() {
                for j in hl.base.clone() {
                    theta[j] = rate.sqrt();
                }
            } else {
                theta[hl.base.start] = rate.sqrt();
                theta[hl.base.start + 1] = 1.0;
            }
        }
        theta
    }
}

/// Intercept and common squared coefficient so that `c0 + a * sum_j I_j(y)`
/// matches the standardized outcome scaled to the latent marginal variance.
fn link_start(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return (0.0, 1.0);
    }
    let my = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let sy = (pts.iter().map(|p| (p.0 - my).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sy > 0.0) {
        return (0.0, 1.0);
    }
    let target: Vec<f64> = pts.iter().map(|p| std::f64::consts::SQRT_2 * (p.0 - my) / sy).collect();
    let mi = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.1 - mi).powi(2)).sum();
    let sxy: f64 = pts.iter().zip(&target).map(|(p, t)| (p.1 - mi) * (t - mt)).sum();
    let a = if sxx > 0.0 { (sxy / sxx).max(0.05) } else { 1.0 };
    (mt - a * mi, a)
}

impl Objective for Engine {
    fn value(&self, theta: &[f64]) -> f64 {
        self.loglik(theta)
    }

    fn local_model(&self, theta: &[f64]) -> Option<LocalModel> {
        let (ll, scores) = self.scores(theta).ok()?;
        let value: f64 = ll.iter().sum();
        if !value.is_finite() {
            return None;
        }
        let p = theta.len();
        let mut gradient = vec![0.0; p];
        let mut info = DMatrix::zeros(p, p);
        for s in &scores {
            for i in 0..p {
                gradient[i] += s[i];
                if s[i] != 0.0 {
                    for j in 0..=i {
                        info[(i, j)] += s[i] * s[j];
                    }
                }
            }
        }
        for i in 0..p {
            for j in 0..i {
                info[(j, i)] = info[(i, j)];
            }
        }
        if gradient.iter().any(|g| !g.is_finite()) {
            return None;
        }
        Some(LocalModel { value, gradient, information: info })
    }
}

#[cfg(test)]
mod tests;
