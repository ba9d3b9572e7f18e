use std::collections::BTreeMap;

use super::*;
use crate::model::{Baseline, HazardSpec, LatentVisit, LinkSpec, RandomEffects, TimeDesign};
use crate::numerics::normal::{normal_cdf, normal_sf};
use crate::numerics::optim::{fd_gradient, OptimizerSettings};
use crate::numerics::splines::SplineBasis;

fn patient(id: &str, x: f64, visits: Vec<(f64, Vec<Option<f64>>)>, t: f64, cause: u32) -> LatentPatient {
    LatentPatient {
        id: id.into(),
        covariates: BTreeMap::from([("x".to_string(), x)]),
        visits: visits.into_iter().map(|(time, values)| LatentVisit { time, values }).collect(),
        event_time: t,
        event_cause: cause,
    }
}

fn mixed_spec(assoc: [Association; 2], baseline: Baseline, diagonal: bool) -> LatentModelSpec {
    LatentModelSpec {
        time: TimeDesign {
            basis: SplineBasis::natural_cubic((0.0, 4.0), vec![1.5]).unwrap(),
            covariates: vec!["x".into()],
            time_interactions: vec!["x".into()],
        },
        random: RandomEffects { time_columns: vec![0], diagonal },
        outcomes: vec![
            OutcomeSpec::Ordinal { name: "a".into(), max_level: 3 },
            OutcomeSpec::Curvilinear {
                name: "s".into(),
                link: LinkSpec::ISpline { basis: SplineBasis::quadratic_ispline((0.0, 10.0), vec![3.0, 6.0]).unwrap() },
            },
            OutcomeSpec::Curvilinear { name: "l".into(), link: LinkSpec::Linear { range: (0.0, 5.0) } },
        ],
        hazards: vec![
            HazardSpec { name: "death".into(), baseline, covariates: vec!["x".into()], association: assoc[0] },
            HazardSpec {
                name: "other".into(),
                baseline: Baseline::PiecewiseConstant { cuts: vec![1.0, 2.5] },
                covariates: vec![],
                association: assoc[1],
            },
        ],
        qmc_points: 64,
        quadrature_nodes: 15,
        optimizer: OptimizerSettings::default(),
    }
}

fn mixed_data() -> Vec<LatentPatient> {
    vec![
        patient("1", 0.5, vec![(0.0, vec![Some(1.0), Some(2.5), Some(1.0)]), (1.2, vec![Some(2.0), None, Some(2.2)])], 2.7, 1),
        patient("2", -1.0, vec![(0.3, vec![Some(0.0), Some(0.4), None]), (2.0, vec![Some(3.0), Some(9.1), Some(4.9)])], 3.1, 2),
        patient("3", 0.0, vec![(0.0, vec![None, Some(5.0), Some(0.0)])], 0.8, 0),
        patient("4", 1.2, vec![(0.1, vec![Some(3.0), Some(7.0), Some(3.0)]), (1.1, vec![Some(2.0), Some(6.0), None]), (2.2, vec![Some(3.0), Some(8.0), Some(4.0)])], 3.6, 1),
    ]
}

fn some_theta(engine: &Engine) -> Vec<f64> {
    let mut t = engine.initial_theta();
    for (i, v) in t.iter_mut().enumerate() {
        *v += 0.05 * ((i * 7 % 5) as f64 - 2.0);
    }
    t
}

fn check_gradient(spec: &LatentModelSpec) {
    let data = mixed_data();
    let engine = Engine::new(spec, &data).unwrap();
    let mut theta = some_theta(&engine);
    for hl in &engine.layout().hazards {
        for j in hl.alpha.clone() {
            theta[j] = 0.4;
        }
    }
    let (_, scores) = engine.scores(&theta).unwrap();
    let an: Vec<f64> = (0..theta.len()).map(|j| scores.iter().map(|s| s[j]).sum()).collect();
    let settings = OptimizerSettings { fd_step_scale: 1.0, ..Default::default() };
    let fd = fd_gradient(|t| engine.loglik(t), &theta, &settings);
    for (j, (a, f)) in an.iter().zip(&fd).enumerate() {
        assert!(
            (a - f).abs() < 1e-5 * (1.0 + f.abs()),
            "{}: analytic {a} vs fd {f}",
            engine.layout().names[j]
        );
    }
}

#[test]
fn gradient_matches_finite_differences_current_value() {
    check_gradient(&mixed_spec([Association::CurrentValue, Association::None], Baseline::Weibull, false));
}

#[test]
fn gradient_matches_finite_differences_random_effects() {
    check_gradient(&mixed_spec([Association::RandomEffects, Association::CurrentValue], Baseline::Weibull, true));
}

#[test]
fn gradient_matches_finite_differences_spline_baseline() {
    let b = Baseline::CubicBSpline { interior: vec![1.0, 2.0], boundary: (0.0, 3.0) };
    check_gradient(&mixed_spec([Association::CurrentValue, Association::RandomEffects], b, false));
}

#[test]
fn dense_rule_is_used_for_large_alpha() {
    let spec = mixed_spec([Association::CurrentValue, Association::None], Baseline::Weibull, false);
    let engine = Engine::new(&spec, &mixed_data()).unwrap();
    let mut theta = some_theta(&engine);
    let a = engine.layout().hazards[0].alpha.start;
    theta[a] = 2.5;
    let (_, scores) = engine.scores(&theta).unwrap();
    let an: f64 = scores.iter().map(|s| s[a]).sum();
    let fd = fd_gradient(|t| engine.loglik(t), &theta, &OptimizerSettings::default());
    assert!((an - fd[a]).abs() < 1e-5 * (1.0 + fd[a].abs()));
}

/// Random-intercept model with one cause and no association, so the hazard
/// factor is constant in `b` and the remaining integral is one dimensional.
fn intercept_spec(outcome: OutcomeSpec, assoc: Association, qmc: usize) -> LatentModelSpec {
    LatentModelSpec {
        time: TimeDesign {
            basis: SplineBasis::natural_cubic((0.0, 4.0), vec![]).unwrap(),
            covariates: vec![],
            time_interactions: vec![],
        },
        random: RandomEffects::default(),
        outcomes: vec![outcome],
        hazards: vec![HazardSpec {
            name: "death".into(),
            baseline: Baseline::Weibull,
            covariates: vec![],
            association: assoc,
        }],
        qmc_points: qmc,
        quadrature_nodes: 15,
        optimizer: OptimizerSettings::default(),
    }
}

fn gl_integral(f: impl Fn(f64) -> f64) -> f64 {
    let gl = gauss_legendre(40, -1.0, 1.0).unwrap();
    (0..40)
        .map(|k| {
            let a = -10.0 + 0.5 * k as f64;
            gl.mapped(a, a + 0.5).integrate(|b| f(b) * normal_pdf(b))
        })
        .sum()
}

#[test]
fn ordinal_marginal_matches_quadrature_oracle() {
    let spec = intercept_spec(OutcomeSpec::Ordinal { name: "a".into(), max_level: 2 }, Association::None, 4096);
    let data = vec![patient("1", 0.0, vec![(0.0, vec![Some(0.0)]), (1.0, vec![Some(1.0)]), (3.0, vec![Some(2.0)])], 3.5, 1)];
    let engine = Engine::new(&spec, &data).unwrap();
    // beta, thresholds (d1, s2), log sd, weibull (sqrt scale, sqrt shape)
    let theta = vec![0.8, -0.3, 0.9, 0.2f64.ln(), 0.1f64.sqrt(), 1.3f64.sqrt()];
    let f1 = engine.time_row(1.0)[0];
    let f3 = engine.time_row(3.0)[0];
    let sd = 0.2;
    let thr = [-0.3, -0.3 + 0.81];
    let lik = gl_integral(|b| {
        let d0 = b;
        let d1 = 0.8 * f1 + b;
        let d3 = 0.8 * f3 + b;
        normal_cdf((thr[0] - d0) / sd)
            * normal_interval((thr[0] - d1) / sd, (thr[1] - d1) / sd)
            * normal_sf((thr[1] - d3) / sd)
    });
    let (z1, z2) = (0.1, 1.3);
    let surv = (z1 * z2 * (z1 * 3.5f64).powf(z2 - 1.0)).ln() - (z1 * 3.5f64).powf(z2);
    let oracle = lik.ln() + surv;
    let got = engine.checked_loglik(&theta).unwrap();
    assert!((got - oracle).abs() < 1e-4, "{got} vs {oracle}");
}

#[test]
fn linear_link_marginal_is_multivariate_normal() {
    let link = LinkSpec::Linear { range: (0.0, 10.0) };
    let spec = intercept_spec(OutcomeSpec::Curvilinear { name: "s".into(), link }, Association::None, 4096);
    let ys = [2.0, 3.5, 7.0];
    let ts = [0.0, 1.5, 3.0];
    let data = vec![patient(
        "1",
        0.0,
        ts.iter().zip(&ys).map(|(&t, &y)| (t, vec![Some(y)])).collect(),
        3.2,
        0,
    )];
    let engine = Engine::new(&spec, &data).unwrap();
    let (c0, c1, sd, beta) = (-1.0, 1.5f64, 0.7f64, 0.4);
    let theta = vec![beta, c0, c1, sd.ln(), 0.2f64.sqrt(), 1.0];
    // H(y) ~ N(mu, sd^2 I + 1 1')
    let h: Vec<f64> = ys.iter().map(|y| c0 + c1 * c1 * y / 10.0).collect();
    let r: Vec<f64> = ts.iter().zip(&h).map(|(&t, &hv)| hv - beta * engine.time_row(t)[0]).collect();
    let s2 = sd * sd;
    let n = 3.0;
    let sum: f64 = r.iter().sum();
    let ss: f64 = r.iter().map(|v| v * v).sum();
    // (s2 I + J)^-1 = (I - J / (s2 + n)) / s2, det = s2^(n-1) (s2 + n)
    let quad = (ss - sum * sum / (s2 + n)) / s2;
    let logdet = (n - 1.0) * s2.ln() + (s2 + n).ln();
    let jac = n * (c1 * c1 / 10.0).ln();
    let oracle = -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + quad) + jac - (0.2f64 * 3.2).powf(1.0);
    let got = engine.checked_loglik(&theta).unwrap();
    assert!((got - oracle).abs() < 1e-4, "{got} vs {oracle}");
}

#[test]
fn current_value_survival_matches_quadrature_oracle() {
    let spec = intercept_spec(OutcomeSpec::Ordinal { name: "a".into(), max_level: 1 }, Association::CurrentValue, 4096);
    let data = vec![patient("1", 0.0, vec![(0.0, vec![None])], 2.4, 1)];
    let engine = Engine::new(&spec, &data).unwrap();
    let (beta, z1, z2, alpha) = (0.7, 0.3f64, 1.4f64, 0.6);
    let theta = vec![beta, 0.0, 0.0, z1.sqrt(), z2.sqrt(), alpha];
    let lam0 = |t: f64| z1 * z2 * (z1 * t).powf(z2 - 1.0);
    let delta = |t: f64, b: f64| beta * engine.time_row(t)[0] + b;
    let fine = gauss_legendre(60, 0.0, 2.4).unwrap();
    let lik = gl_integral(|b| {
        let cum = fine.integrate(|t| lam0(t) * (alpha * delta(t, b)).exp());
        lam0(2.4) * (alpha * delta(2.4, b)).exp() * (-cum).exp()
    });
    let got = engine.checked_loglik(&theta).unwrap();
    assert!((got - lik.ln()).abs() < 1e-4, "{got} vs {}", lik.ln());
}

#[test]
fn rejects_bad_observations() {
    let spec = intercept_spec(OutcomeSpec::Ordinal { name: "a".into(), max_level: 2 }, Association::None, 8);
    assert!(Engine::new(&spec, &[patient("1", 0.0, vec![(0.0, vec![Some(3.0)])], 1.0, 0)]).is_err());
    assert!(Engine::new(&spec, &[patient("1", 0.0, vec![(0.0, vec![Some(0.5)])], 1.0, 0)]).is_err());
    assert!(Engine::new(&spec, &[patient("1", 0.0, vec![(0.0, vec![Some(1.0)])], 1.0, 2)]).is_err());
    assert!(Engine::new(&spec, &[patient("1", 0.0, vec![(0.0, vec![])], 1.0, 0)]).is_err());
    assert!(Engine::new(&spec, &[]).is_err());
}

#[test]
fn non_finite_contribution_names_the_patient() {
    let spec = intercept_spec(OutcomeSpec::Ordinal { name: "a".into(), max_level: 2 }, Association::None, 8);
    let data = vec![patient("p7", 0.0, vec![(0.0, vec![Some(1.0)])], 1.0, 1)];
    let engine = Engine::new(&spec, &data).unwrap();
    // zero Weibull scale gives a zero hazard at the event
    let theta = vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    match engine.checked_loglik(&theta) {
        Err(Error::NonFinite { patient }) => assert_eq!(patient, "p7"),
        other => panic!("{other:?}"),
    }
}
