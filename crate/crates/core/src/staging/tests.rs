use std::collections::BTreeMap;

use super::*;
use crate::data::{ItemDef, PatientRecord, ScaleDefinition, Visit};
use crate::model::{Association, Baseline, LatentVisit};
use crate::numerics::normal::{normal_cdf, normal_pdf, normal_sf};
use crate::numerics::quadrature::gauss_legendre;
use crate::sequencing::{ItemMeasurement, JlpmSpec, MeasurementParams};

fn dim() -> Subdimension {
    Subdimension { name: "motor".into(), items: vec!["a".into(), "b".into()] }
}

fn weibull_none() -> Vec<HazardSpec> {
    vec![HazardSpec {
        name: "death".into(),
        baseline: Baseline::Weibull,
        covariates: vec![],
        association: Association::None,
    }]
}

fn time() -> TimeDesign {
    TimeDesign {
        basis: SplineBasis::natural_cubic((0.0, 5.0), vec![]).unwrap(),
        covariates: vec![],
        time_interactions: vec![],
    }
}

fn spec(link: Option<LinkSpec>, qmc: usize) -> StagingSpec {
    StagingSpec {
        subdimension: dim(),
        time: time(),
        random: RandomEffects::default(),
        link,
        hazards: weibull_none(),
        qmc_points: qmc,
        quadrature_nodes: 15,
        optimizer: OptimizerSettings::default(),
        max_missing_frac: 0.25,
    }
}

fn cohort() -> CohortDataset {
    let scale = ScaleDefinition::new(vec![
        ItemDef { id: "a".into(), max_level: 2 },
        ItemDef { id: "b".into(), max_level: 2 },
    ])
    .unwrap();
    let v = |time: f64, a: u32, b: u32, stage: u32| Visit { time, responses: vec![Some(a), Some(b)], stage: Some(stage) };
    let patient = |id: &str, visits: Vec<Visit>, t: f64, d: u32| PatientRecord {
        id: id.into(),
        covariates: BTreeMap::new(),
        visits,
        event_time: t,
        event_cause: d,
    };
    CohortDataset {
        scale,
        patients: vec![
            patient("1", vec![v(0.0, 0, 1, 1), v(1.0, 1, 1, 1), v(2.1, 2, 1, 2)], 2.5, 1),
            patient("2", vec![v(0.0, 1, 2, 2), v(0.9, 2, 2, 2)], 1.4, 0),
            patient("3", vec![v(0.2, 0, 0, 1)], 3.0, 1),
        ],
        n_stages: 2,
        n_causes: 1,
    }
}

#[test]
fn linear_link_two_stage_model_matches_quadrature_oracle() {
    let data = cohort();
    let s = spec(Some(LinkSpec::Linear { range: (0.0, 4.0) }), 4096);
    let (beta, omega, sd_s, c0, c1, sd_y, z1, z2) : (f64, f64, f64, f64, f64, f64, f64, f64) = (0.6, 0.4, 0.8, -1.2, 1.3, 0.5, 0.2, 1.1);
    let theta = vec![beta, omega, sd_s.ln(), c0, c1, sd_y.ln(), z1.sqrt(), z2.sqrt()];
    let got = staging_log_likelihood(&s, &data, &theta).unwrap();

    let basis = time().basis;
    let h = |y: f64| c0 + c1 * c1 * y / 4.0;
    let dh = c1 * c1 / 4.0;
    let gl = gauss_legendre(40, -1.0, 1.0).unwrap();
    let mut oracle = 0.0;
    for p in &data.patients {
        let lik: f64 = (0..40)
            .map(|k| {
                let a = -10.0 + 0.5 * k as f64;
                gl.mapped(a, a + 0.5).integrate(|b| {
                    let mut f = normal_pdf(b);
                    for v in &p.visits {
                        let d = beta * basis.eval(v.time)[0] + b;
                        let y: f64 = v.responses.iter().map(|r| r.unwrap() as f64).sum();
                        let ps = if v.stage == Some(1) {
                            normal_cdf((omega - d) / sd_s)
                        } else {
                            normal_sf((omega - d) / sd_s)
                        };
                        f *= ps * normal_pdf((h(y) - d) / sd_y) / sd_y * dh;
                    }
                    f
                })
            })
            .sum();
        let t = p.event_time;
        let surv = -(z1 * t).powf(z2) + if p.event_cause == 1 { (z1 * z2 * (z1 * t).powf(z2 - 1.0)).ln() } else { 0.0 };
        oracle += lik.ln() + surv;
    }
    assert!((got - oracle).abs() < 1e-3 * data.patients.len() as f64, "{got} vs {oracle}");
    assert!((got - oracle).abs() < 1e-4, "{got} vs {oracle}");
}

#[test]
fn dropping_the_stage_reduces_to_the_score_model() {
    let link = LinkSpec::ISpline { basis: SplineBasis::quadratic_ispline((0.0, 4.0), vec![1.0, 2.5]).unwrap() };
    let both = LatentModelSpec {
        time: time(),
        random: RandomEffects::default(),
        outcomes: vec![
            OutcomeSpec::Ordinal { name: "stage".into(), max_level: 1 },
            OutcomeSpec::Curvilinear { name: "motor".into(), link: link.clone() },
        ],
        hazards: weibull_none(),
        qmc_points: 256,
        quadrature_nodes: 15,
        optimizer: OptimizerSettings::default(),
    };
    let mut score_only = both.clone();
    score_only.outcomes.remove(0);
    let mk = |with_stage: bool| -> Vec<LatentPatient> {
        vec![LatentPatient {
            id: "1".into(),
            covariates: BTreeMap::new(),
            visits: [(0.0, 1.5), (1.0, 2.0), (2.0, 3.5)]
                .iter()
                .map(|&(t, y)| LatentVisit {
                    time: t,
                    values: if with_stage { vec![None, Some(y)] } else { vec![Some(y)] },
                })
                .collect(),
            event_time: 2.2,
            event_cause: 1,
        }]
    };
    let e_both = Engine::new(&both, &mk(true)).unwrap();
    let e_score = Engine::new(&score_only, &mk(false)).unwrap();
    let n = e_score.layout().len;
    let score_theta: Vec<f64> = (0..n).map(|k| 0.3 + 0.1 * (k as f64).sin()).collect();
    let mut theta = vec![score_theta[0], 0.1, 0.0];
    theta.extend(&score_theta[1..]);
    let a = e_both.checked_loglik(&theta).unwrap();
    let b = e_score.checked_loglik(&score_theta).unwrap();
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

fn fake_staging(link: LinkSpec, n_stages: u32, present: Vec<u32>, thr: &[f64], raw: &[f64], sd: f64) -> StagingFit {
    StagingFit::with_parameters(&spec(Some(link), 64), n_stages, present, thr, 1.0, raw, sd).unwrap()
}

#[test]
fn absent_stages_merge_thresholds() {
    let link = LinkSpec::Linear { range: (0.0, 4.0) };
    let f = fake_staging(link.clone(), 5, vec![1, 2, 4, 5], &[-1.0, 0.0, 1.0], &[0.0, 1.0], 1.0);
    assert_eq!(f.omega(), vec![-1.0, 0.0, 0.0, 1.0]);
    let f = fake_staging(link, 4, vec![2, 3], &[0.5], &[0.0, 1.0], 1.0);
    assert_eq!(f.omega(), vec![f64::NEG_INFINITY, 0.5, f64::INFINITY]);
    assert!(stage_sum_score_equivalent(&f, 2, 100).is_err());
    assert!(stage_sum_score_equivalent(&f, 3, 100).is_ok());
    assert!(stage_sum_score_equivalent(&f, 5, 100).is_err());
}

#[test]
fn equivalent_limits() {
    // linear link H(y) = -2 + 4 y / 10, so H^-1(w) = 10 (w + 2) / 4
    let link = LinkSpec::Linear { range: (0.0, 10.0) };
    let f = fake_staging(link, 3, vec![1, 2, 3], &[-1.0, 0.5], &[-2.0, 2.0], 0.3);
    let e = stage_sum_score_equivalent(&f, 3, 2048).unwrap();
    assert_eq!(e.clamp_rate, 0.0);
    assert!((e.value - 10.0 * 2.5 / 4.0).abs() < 1e-6, "{}", e.value);
    // vanishing noise gives the inverse link at omega
    let link = LinkSpec::ISpline { basis: SplineBasis::quadratic_ispline((0.0, 10.0), vec![2.0, 5.0]).unwrap() };
    let raw = [-3.0, 1.0, 0.5, 1.5, 0.8, 1.2];
    let f = fake_staging(link.clone(), 3, vec![1, 2, 3], &[-1.0, 0.5], &raw, 1e-13);
    let e = stage_sum_score_equivalent(&f, 2, 2000).unwrap();
    let (inv, _) = link_inverse(&link, &raw, -1.0);
    assert!((e.value - inv).abs() < 1e-9);
    // doubling the draws barely moves the estimate
    let f = fake_staging(link, 3, vec![1, 2, 3], &[-1.0, 0.5], &raw, 0.6);
    let a = stage_sum_score_equivalent(&f, 2, 2000).unwrap().value;
    let b = stage_sum_score_equivalent(&f, 2, 4000).unwrap().value;
    assert!((a - b).abs() <= 0.05);
}

fn jlpm(items: Vec<(Vec<f64>, f64)>) -> JlpmFit {
    let meas = MeasurementParams {
        items: items
            .into_iter()
            .enumerate()
            .map(|(k, (thresholds, sd))| ItemMeasurement { id: format!("i{k}"), thresholds, sd })
            .collect(),
    };
    let spec = JlpmSpec {
        subdimension: Subdimension { name: "d".into(), items: meas.items.iter().map(|i| i.id.clone()).collect() },
        time: time(),
        random: RandomEffects::default(),
        hazards: weibull_none(),
        qmc_points: 64,
        quadrature_nodes: 15,
        optimizer: OptimizerSettings::default(),
    };
    JlpmFit::with_measurement(&spec, &meas).unwrap()
}

#[test]
fn projection_examples() {
    let sym = jlpm(vec![(vec![-1.0, 1.0], 1.0), (vec![-0.5, 0.5], 1.0)]);
    let p = project_stage_thresholds(&sym, &[2.0]).unwrap();
    assert!(p.transitions[0].delta.unwrap().abs() < 1e-10);

    let one = jlpm(vec![(vec![0.5], 1.0)]);
    let p = project_stage_thresholds(&one, &[0.5]).unwrap();
    assert!((p.transitions[0].delta.unwrap() - 0.5).abs() < 1e-10);

    let f = jlpm(vec![(vec![-1.0, 0.3, 2.0], 0.7), (vec![-0.2, 1.5], 1.3), (vec![0.9], 0.4)]);
    let targets = [0.4, 1.7, 3.1, 5.9];
    let p = project_stage_thresholds(&f, &targets).unwrap();
    let meas = f.measurement();
    let mut prev = f64::NEG_INFINITY;
    for (t, target) in p.transitions.iter().zip(targets) {
        let d = t.delta.unwrap();
        assert!((meas.expected_sum(d) - target).abs() < 1e-8);
        assert!(d > prev);
        prev = d;
    }
    match project_stage_thresholds(&f, &[1.0, 6.0]) {
        Err(Error::OutOfRange { stage, .. }) => assert_eq!(stage, 3),
        other => panic!("{other:?}"),
    }
    assert!(project_stage_thresholds(&f, &[0.0]).is_err());
}

#[test]
fn projection_is_location_equivariant() {
    let base = vec![(vec![-1.0, 0.3, 2.0], 0.7), (vec![-0.2, 1.5], 1.3)];
    let c = 3.25;
    let shifted = base.iter().map(|(t, s)| (t.iter().map(|v| v + c).collect(), *s)).collect();
    let targets = [0.5, 2.0, 4.2];
    let a = project_stage_thresholds(&jlpm(base), &targets).unwrap();
    let b = project_stage_thresholds(&jlpm(shifted), &targets).unwrap();
    for (x, y) in a.transitions.iter().zip(&b.transitions) {
        assert!((y.delta.unwrap() - x.delta.unwrap() - c).abs() < 1e-8);
    }
}

#[test]
fn bounds_and_stage_bands() {
    let p = StageProjection {
        subdimension: "d".into(),
        transitions: vec![
            StageTransition { stage: 2, omega: None, equivalent: None, delta: None },
            StageTransition { stage: 3, omega: Some(0.1), equivalent: Some(1.0), delta: Some(-0.5) },
            StageTransition { stage: 4, omega: Some(0.9), equivalent: Some(2.0), delta: Some(0.7) },
            StageTransition { stage: 5, omega: None, equivalent: None, delta: None },
        ],
    };
    let b = p.bounds();
    assert_eq!(b, vec![f64::NEG_INFINITY, f64::NEG_INFINITY, -0.5, 0.7, f64::INFINITY, f64::INFINITY]);
    assert_eq!(p.stage_of(-3.0), 2);
    assert_eq!(p.stage_of(0.0), 3);
    assert_eq!(p.stage_of(5.0), 4);
}

#[test]
fn default_link_knots_inside_observed_range() {
    let link = default_link(&[2.0, 5.0, 8.0], 12.0).unwrap();
    match link {
        LinkSpec::ISpline { basis } => {
            assert_eq!(basis.boundary(), (0.0, 12.0));
            assert_eq!(basis.interior(), &[3.0, 4.0, 5.0, 6.0, 7.0]);
        }
        _ => panic!(),
    }
    assert!(default_link(&[3.0, 3.0], 12.0).is_err());
}

#[test]
fn staging_rejects_covariates_and_single_stage() {
    let mut s = spec(None, 16);
    s.time.covariates = vec!["sex".into()];
    assert!(fit_staging(&s, &cohort()).is_err());
    let mut d = cohort();
    for p in &mut d.patients {
        for v in &mut p.visits {
            v.stage = Some(1);
        }
    }
    assert!(fit_staging(&spec(None, 16), &d).is_err());
}
