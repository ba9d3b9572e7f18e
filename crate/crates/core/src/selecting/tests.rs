use proptest::prelude::*;

use super::*;
use crate::staging::StageTransition;

fn item(id: &str, thresholds: Vec<f64>, sd: f64) -> ItemMeasurement {
    ItemMeasurement { id: id.into(), thresholds, sd }
}

fn meas(items: Vec<ItemMeasurement>) -> MeasurementParams {
    MeasurementParams { items }
}

fn projection(deltas: &[Option<f64>]) -> StageProjection {
    StageProjection {
        subdimension: "d".into(),
        transitions: deltas
            .iter()
            .enumerate()
            .map(|(j, d)| StageTransition { stage: j as u32 + 2, omega: None, equivalent: None, delta: *d })
            .collect(),
    }
}

fn battery() -> MeasurementParams {
    meas(vec![
        item("walk", vec![-1.5, -0.2, 0.9], 0.6),
        item("talk", vec![0.3, 1.4], 1.2),
        item("swallow", vec![2.0], 0.4),
        item("write", vec![-0.6, 0.1, 0.4, 2.2], 0.9),
    ])
}

#[test]
fn binary_probit_closed_form() {
    let m = meas(vec![item("x", vec![0.0], 1.0)]);
    let i = item_information(&m, 0, 0.0).unwrap();
    let want = 4.0 * normal_pdf(0.0).powi(2);
    assert!((i - want).abs() < 1e-15);
    assert!((i - 0.63662).abs() < 1e-5);
    assert!(item_information(&m, 0, 40.0).unwrap() < 1e-12);
    assert!(item_information(&m, 0, -40.0).unwrap() < 1e-12);
    assert!(item_information(&m, 1, 0.0).is_err());
}

#[test]
fn matches_expected_curvature_of_log_probability() {
    let m = battery();
    let h = 1e-4;
    for (k, it) in m.items.iter().enumerate() {
        for d in [-2.0, -0.7, 0.0, 0.35, 1.1, 2.5] {
            let lp = |x: f64, l: u32| it.probability(l, x).ln();
            let fd: f64 = (0..=it.max_level())
                .map(|l| {
                    let second = (lp(d + h, l) - 2.0 * lp(d, l) + lp(d - h, l)) / (h * h);
                    -it.probability(l, d) * second
                })
                .sum();
            let got = item_information(&m, k, d).unwrap();
            assert!((got - fd).abs() < 1e-6, "item {k} at {d}: {got} vs {fd}");
        }
    }
}

#[test]
fn two_term_form_and_boundary_identities() {
    let m = battery();
    let p = projection(&[Some(-1.0), Some(0.2), Some(0.8), Some(1.9)]);
    for k in 0..m.items.len() {
        let mut sum = 0.0;
        for s in 1..=p.n_stages() {
            let (lo, hi) = stage_interval(&p, s).unwrap();
            let two = stage_information(&m, &p, k, s).unwrap();
            let direct = interval_information(&m, k, lo, hi).unwrap();
            assert!((two - direct).abs() < 1e-10, "item {k} stage {s}: {two} vs {direct}");
            let b: f64 = boundary_terms(&m, k, lo, hi).unwrap().iter().sum();
            assert!(b.abs() < 1e-12);
            sum += two;
        }
        let total = total_information(&m, k).unwrap();
        assert!((sum - total).abs() < 1e-8, "{sum} vs {total}");
    }
}

#[test]
fn truncation_loses_nothing() {
    // the single integral already equals the integral of the full line
    let m = meas(vec![item("x", vec![0.0], 1.0)]);
    let wide = integrate_adaptive(&|x| item_information(&m, 0, x).unwrap(), -30.0, 30.0, &rule(), 1e-14);
    let total = total_information(&m, 0).unwrap();
    assert!((wide - total).abs() < 1e-12);
}

#[test]
fn single_item_gets_full_share() {
    let m = meas(vec![item("only", vec![-0.5, 0.5], 0.8)]);
    let t = information_table(&m, &projection(&[Some(0.0)])).unwrap();
    for st in &t.stages {
        assert_eq!(st.rows.len(), 1);
        assert!((st.rows[0].share.unwrap() - 100.0).abs() < 1e-12);
    }
}

#[test]
fn identical_items_split_evenly_by_id_order() {
    let m = meas(vec![item("b", vec![0.0, 1.0], 0.7), item("a", vec![0.0, 1.0], 0.7)]);
    let t = information_table(&m, &projection(&[Some(0.5)])).unwrap();
    for st in &t.stages {
        assert_eq!(st.rows[0].item, "b");
        assert_eq!(st.rows[1].item, "a");
        assert_eq!((st.rows[0].rank, st.rows[1].rank), (1, 2));
        assert!((st.rows[0].share.unwrap() - 50.0).abs() < 1e-12);
        assert!((st.rows[1].cumulative.unwrap() - 100.0).abs() < 1e-12);
    }
}

#[test]
fn sharp_item_centred_in_stage_outranks_flat_one() {
    let m = meas(vec![item("flat", vec![0.5], 3.0), item("sharp", vec![0.5], 0.2)]);
    let p = projection(&[Some(0.0), Some(1.0)]);
    let t = information_table(&m, &p).unwrap();
    let st = t.stage(2).unwrap();
    assert_eq!(st.rows[0].item, "sharp");
    let direct = |k| interval_information(&m, k, 0.0, 1.0).unwrap();
    assert!(direct(1) > direct(0));
}

#[test]
fn shares_and_cumulative() {
    let m = battery();
    let t = information_table(&m, &projection(&[Some(-1.0), Some(0.2), Some(0.8), Some(1.9)])).unwrap();
    assert!(t.warnings.is_empty());
    for st in &t.stages {
        let s: f64 = st.rows.iter().map(|r| r.share.unwrap()).sum();
        assert!((s - 100.0).abs() < 1e-6);
        let cum: Vec<f64> = st.rows.iter().map(|r| r.cumulative.unwrap()).collect();
        assert!(cum.windows(2).all(|w| w[1] >= w[0]));
        assert!((cum.last().unwrap() - 100.0).abs() < 1e-6);
        assert!(st.rows.windows(2).all(|w| w[0].info >= w[1].info));
    }
}

#[test]
fn empty_stage_is_flagged() {
    // stage 1 collapses: both bounds are -inf
    let m = battery();
    let p = projection(&[None, Some(0.0)]);
    let t = information_table(&m, &p).unwrap();
    let st = t.stage(1).unwrap();
    assert!(!st.informative);
    assert!(st.rows.iter().all(|r| r.share.is_none() && r.info == 0.0));
    assert_eq!(t.warnings.len(), 2);
    let csv = String::from_utf8(t.to_csv().unwrap()).unwrap();
    assert!(csv.starts_with("stage,rank,item,info,share,cumulative\n"));
    assert!(csv.contains("\n1,1,walk,0,,\n"));
}

#[test]
fn permutation_equivariance() {
    let m = battery();
    let p = projection(&[Some(-1.0), Some(0.5)]);
    let mut items = m.items.clone();
    items.reverse();
    let a = information_table(&m, &p).unwrap();
    let b = information_table(&meas(items), &p).unwrap();
    for (x, y) in a.stages.iter().zip(&b.stages) {
        for r in &x.rows {
            let other = y.rows.iter().find(|o| o.item == r.item).unwrap();
            assert_eq!(r.info, other.info);
        }
    }
}

#[test]
fn sharper_items_carry_more_information() {
    let base = battery();
    for (k, it) in base.items.iter().enumerate() {
        for c in [1.1, 1.5, 3.0] {
            let sharper = meas(vec![item("x", it.thresholds.clone(), it.sd / c)]);
            assert!(total_information(&sharper, 0).unwrap() > total_information(&base, k).unwrap());
        }
    }
}

proptest! {
    #[test]
    fn information_is_nonnegative_and_additive(
        raw in proptest::collection::vec(-3.0f64..3.0, 1..5),
        sd in 0.2f64..3.0,
        cuts in proptest::collection::vec(-4.0f64..4.0, 1..4),
    ) {
        let mut thr = raw;
        thr.sort_by(f64::total_cmp);
        let m = meas(vec![item("x", thr, sd)]);
        for j in -100..=100 {
            prop_assert!(item_information(&m, 0, j as f64 * 0.1).unwrap() >= 0.0);
        }
        let mut cuts = cuts;
        cuts.sort_by(f64::total_cmp);
        let p = projection(&cuts.iter().map(|c| Some(*c)).collect::<Vec<_>>());
        let sum: f64 = (1..=p.n_stages()).map(|s| stage_information(&m, &p, 0, s).unwrap()).sum();
        let total = total_information(&m, 0).unwrap();
        prop_assert!((sum - total).abs() < 1e-8);
    }
}
