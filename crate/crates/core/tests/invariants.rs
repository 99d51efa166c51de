use std::collections::BTreeSet;

use cpaudit_core::audit::{coverage_report, superclass_collapse};
use cpaudit_core::bounds::{clopper_pearson, hoeffding_lcb};
use cpaudit_core::conformal::{calibrate, calibrate_dataset, descending_order, predict_sets};
use cpaudit_core::data::{resample_weighted, split_dataset};
use cpaudit_core::selective::{selective_curve, SelectiveConfig};
use cpaudit_core::shift::{apply_shift, ShiftKind, ShiftSpec};
use cpaudit_core::synth::{generate, GroupSpec, SynthConfig};
use cpaudit_core::{LabeledDataset, ScoreConfig, SplitSpec, Taxonomy};
use proptest::prelude::*;

fn synth(n: usize, k: usize, conc: f64, seed: u64) -> LabeledDataset {
    generate(&SynthConfig::uniform(n, k, conc, seed)).unwrap()
}

fn sets_at(cal: &LabeledDataset, eval: &LabeledDataset, alpha: f64) -> Vec<BTreeSet<usize>> {
    let calib = calibrate_dataset(cal, &ScoreConfig::deterministic(alpha)).unwrap();
    predict_sets(eval, &calib, 0)
        .unwrap()
        .iter()
        .map(|s| s.members().iter().copied().collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn smaller_alpha_gives_larger_tau_and_supersets(
        seed in 0u64..1000,
        k in 2usize..8,
        a1 in 0.01f64..0.5,
        gap in 0.001f64..0.4,
    ) {
        let a2 = a1 + gap;
        let ds = synth(300, k, 1.5, seed);
        let (cal, eval) = split_dataset(&ds, &SplitSpec { calibration_size: 150, seed, stratify_by_class: false }).unwrap();
        let cfg = ScoreConfig::deterministic(a1);
        let t1 = calibrate_dataset(&cal, &cfg).unwrap().tau;
        let t2 = calibrate_dataset(&cal, &cfg.with_alpha(a2)).unwrap().tau;
        prop_assert!(t1 >= t2);
        for (big, small) in sets_at(&cal, &eval, a1).iter().zip(&sets_at(&cal, &eval, a2)) {
            prop_assert!(big.is_superset(small));
        }
    }

    #[test]
    fn deterministic_sets_are_prefixes(seed in 0u64..1000, k in 2usize..8, alpha in 0.01f64..0.9) {
        let ds = synth(200, k, 1.0, seed);
        let (cal, eval) = split_dataset(&ds, &SplitSpec { calibration_size: 100, seed, stratify_by_class: false }).unwrap();
        for (set, r) in sets_at(&cal, &eval, alpha).iter().zip(eval.records()) {
            let prefix: BTreeSet<usize> = descending_order(r.probs())[..set.len()].iter().copied().collect();
            prop_assert_eq!(set, &prefix);
        }
    }

    #[test]
    fn tau_is_an_order_statistic_or_one(scores in prop::collection::vec(0.0f64..1.0, 1..300), alpha in 0.001f64..0.999) {
        let tau = calibrate(&scores, alpha).unwrap().tau;
        prop_assert!(tau == 1.0 || scores.contains(&tau));
    }

    #[test]
    fn strata_average_to_marginal(seed in 0u64..1000, k in 2usize..7, alpha in 0.02f64..0.5) {
        let ds = synth(400, k, 1.0, seed);
        let (cal, eval) = split_dataset(&ds, &SplitSpec { calibration_size: 200, seed, stratify_by_class: false }).unwrap();
        let calib = calibrate_dataset(&cal, &ScoreConfig::deterministic(alpha)).unwrap();
        let report = coverage_report(&predict_sets(&eval, &calib, 0).unwrap(), &eval, alpha).unwrap();
        for strata in [&report.per_class, &report.per_set_size] {
            let covered: usize = strata.values().map(|s| s.covered).sum();
            let n: usize = strata.values().map(|s| s.n).sum();
            prop_assert_eq!(covered, report.marginal.covered);
            prop_assert_eq!(n, report.marginal.n);
            let weighted: f64 = strata.values().map(|s| s.rate * s.n as f64).sum::<f64>() / n as f64;
            prop_assert!((weighted - report.marginal.rate).abs() < 1e-12);
        }
    }

    #[test]
    fn clopper_pearson_contains_estimate(n in 1usize..5000, frac in 0.0f64..=1.0, conf in 0.5f64..0.999) {
        let x = ((n as f64) * frac).round() as usize;
        let (lo, hi) = clopper_pearson(x, n, conf).unwrap();
        let p = x as f64 / n as f64;
        prop_assert!(lo <= p && p <= hi);
    }

    #[test]
    fn collapse_shrinks_and_is_idempotent(seed in 0u64..1000, alpha in 0.01f64..0.5) {
        let ds = synth(200, 6, 1.0, seed);
        let (cal, eval) = split_dataset(&ds, &SplitSpec { calibration_size: 100, seed, stratify_by_class: false }).unwrap();
        let calib = calibrate_dataset(&cal, &ScoreConfig::deterministic(alpha)).unwrap();
        let sets = predict_sets(&eval, &calib, 0).unwrap();
        let taxonomy = Taxonomy::with_default_names(vec![0, 0, 1, 1, 2, 2]).unwrap();
        let once = superclass_collapse(&sets, &taxonomy).unwrap();
        for (c, s) in once.sets.iter().zip(&sets) {
            prop_assert!(c.len() <= s.len());
        }
        let identity = Taxonomy::with_default_names(vec![0, 1, 2]).unwrap();
        let twice = superclass_collapse(&once.sets, &identity).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn label_shift_keeps_shape(seed in 0u64..1000, raw in prop::collection::vec(0.01f64..1.0, 4), size in 1usize..500) {
        let ds = synth(300, 4, 1.0, seed);
        let total: f64 = raw.iter().sum();
        let spec = ShiftSpec {
            kind: ShiftKind::LabelShift { target: raw.iter().map(|w| w / total).collect() },
            seed,
            size,
        };
        let shifted = apply_shift(&ds, &spec).unwrap();
        prop_assert_eq!(shifted.len(), size);
        prop_assert_eq!(shifted.num_classes(), ds.num_classes());
        prop_assert_eq!(shifted.class_names(), ds.class_names());
        prop_assert_eq!(shifted.taxonomy(), ds.taxonomy());
    }

    #[test]
    fn noiseless_score_shift_keeps_argmax(seed in 0u64..1000, temperature in 0.1f64..10.0) {
        let ds = synth(100, 5, 1.0, seed);
        let spec = ShiftSpec { kind: ShiftKind::ScoreShift { temperature, noise_scale: 0.0 }, seed, size: 0 };
        let shifted = apply_shift(&ds, &spec).unwrap();
        for (a, b) in ds.records().iter().zip(shifted.records()) {
            prop_assert_eq!(a.argmax(), b.argmax());
            prop_assert_eq!(a.label(), b.label());
        }
    }

    #[test]
    fn one_hot_resample_is_single_class(seed in 0u64..1000, class in 0usize..4) {
        let ds = synth(200, 4, 1.0, seed);
        let mut weights = vec![0.0; 4];
        weights[class] = 1.0;
        let out = resample_weighted(&ds, &weights, 150, seed).unwrap();
        prop_assert!(out.records().iter().all(|r| r.label() == class));
    }

    #[test]
    fn split_partitions_ids(seed in 0u64..1000, n_cal in 1usize..199, stratify: bool) {
        let ds = synth(200, 3, 1.0, seed);
        let (cal, eval) = split_dataset(&ds, &SplitSpec { calibration_size: n_cal, seed, stratify_by_class: stratify }).unwrap();
        prop_assert_eq!(cal.len(), n_cal);
        let a: BTreeSet<&str> = cal.records().iter().map(|r| r.id()).collect();
        let b: BTreeSet<&str> = eval.records().iter().map(|r| r.id()).collect();
        let all: BTreeSet<&str> = ds.records().iter().map(|r| r.id()).collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(a.union(&b).copied().collect::<BTreeSet<_>>(), all);
    }

    #[test]
    fn hoeffding_grows_with_n_and_delta(frac in 0.0f64..=1.0, n in 1usize..2000, d1 in 0.001f64..0.5, d_gap in 0.0f64..0.49) {
        let x = ((n as f64) * frac).floor() as usize;
        let base = hoeffding_lcb(x, n, d1).unwrap();
        prop_assert!(hoeffding_lcb(x, n, d1 + d_gap).unwrap() >= base);
        prop_assert!(hoeffding_lcb(x * 2, n * 2, d1).unwrap() >= base);
    }

    #[test]
    fn selective_bound_below_accuracy(seed in 0u64..1000, k in 2usize..6, delta in 0.01f64..0.5) {
        let ds = synth(300, k, 2.0, seed);
        let curve = selective_curve(&ds, &SelectiveConfig::for_dataset(&ds, delta, None)).unwrap();
        for p in curve.points.iter().filter(|p| p.n_kept > 0) {
            prop_assert!(p.lower_bound <= p.empirical_accuracy);
        }
        for w in curve.points.windows(2) {
            prop_assert!(w[0].rejection_fraction <= w[1].rejection_fraction);
            prop_assert!(w[0].n_kept >= w[1].n_kept);
        }
    }

    #[test]
    fn synth_is_deterministic(seed: u64, n in 1usize..300, k in 2usize..8) {
        let a = synth(n, k, 1.0, seed);
        prop_assert_eq!(&a, &synth(n, k, 1.0, seed));
        for r in a.records() {
            let sum: f64 = r.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6 && r.label() < k);
        }
    }
}

#[test]
fn clopper_pearson_narrows_with_n() {
    let widths: Vec<f64> = [10, 100, 10_000]
        .iter()
        .map(|&n| {
            let (lo, hi) = clopper_pearson(n * 7 / 10, n, 0.95).unwrap();
            hi - lo
        })
        .collect();
    assert!(widths[0] > widths[1] && widths[1] > widths[2], "{widths:?}");
}

#[test]
fn low_concentration_group_is_less_accurate() {
    let cfg = SynthConfig {
        group_specs: vec![GroupSpec {
            attribute: "site".into(),
            categories: vec!["A".into(), "B".into()],
            distribution: vec![0.5, 0.5],
            multipliers: vec![1.0, 0.4],
        }],
        ..SynthConfig::uniform(10_000, 7, 2.25, 9)
    };
    let ds = generate(&cfg).unwrap();
    let acc = |site: &str| {
        let rows: Vec<bool> = ds
            .records()
            .iter()
            .filter(|r| r.group("site") == Some(site))
            .map(|r| r.is_correct())
            .collect();
        let p = rows.iter().filter(|c| **c).count() as f64 / rows.len() as f64;
        (p, (p * (1.0 - p) / rows.len() as f64).sqrt())
    };
    let (a, se_a) = acc("A");
    let (b, se_b) = acc("B");
    assert!(a - b > 3.0 * (se_a * se_a + se_b * se_b).sqrt(), "A {a} vs B {b}");
}

#[test]
fn identity_shift_leaves_coverage_alone() {
    use cpaudit_core::shift::shift_experiment;
    use cpaudit_core::trials::mean_and_se;

    let rows: Vec<[f64; 3]> = (0..50u64)
        .map(|seed| {
            let ds = synth(3000, 4, 1.5, seed);
            let (cal, eval) = split_dataset(&ds, &SplitSpec { calibration_size: 500, seed, stratify_by_class: false }).unwrap();
            let spec = ShiftSpec { kind: ShiftKind::LabelShift { target: eval.class_distribution() }, seed, size: 2500 };
            let r = shift_experiment(&cal, &eval, &spec, &ScoreConfig::deterministic(0.1), 500, seed)
                .unwrap()
                .result;
            [r.coverage_before, r.coverage_after_shift, r.coverage_after_recalibration]
        })
        .collect();
    let col = |i: usize| mean_and_se(&rows.iter().map(|r| r[i]).collect::<Vec<_>>());
    let (before, se) = col(0);
    for i in 1..3 {
        let (m, se_i) = col(i);
        assert!((m - before).abs() <= 3.0 * (se * se + se_i * se_i).sqrt(), "{i}: {m} vs {before}");
    }
}
