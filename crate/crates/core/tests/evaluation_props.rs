mod common;

use common::*;
use hsi_fsl::evaluation::*;
use hsi_fsl::hsi_data::Patch;
use hsi_fsl::network::ArchConfig;
use hsi_fsl::synthgen::SynthSpec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// OA, AA over supported classes and kappa straight from (truth, prediction) pairs.
fn brute_metrics(truth: &[usize], pred: &[usize], classes: usize) -> (f64, f64, f64) {
    let n = truth.len() as f64;
    let agree = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64;
    let mut recalls = Vec::new();
    let mut pe = 0.0;
    for c in 0..classes {
        let support = truth.iter().filter(|&&t| t == c).count();
        let predicted = pred.iter().filter(|&&p| p == c).count();
        pe += support as f64 * predicted as f64 / (n * n);
        if support > 0 {
            let hit = truth.iter().zip(pred).filter(|(&t, &p)| t == c && p == c).count();
            recalls.push(hit as f64 / support as f64);
        }
    }
    let po = agree / n;
    let kappa = if pe >= 1.0 {
        if po == 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (po - pe) / (1.0 - pe)
    };
    (po, recalls.iter().sum::<f64>() / recalls.len() as f64, kappa)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_match_brute_force(classes in 1usize..7, pairs in prop::collection::vec((0usize..100, 0usize..100), 1..300)) {
        let truth: Vec<usize> = pairs.iter().map(|p| p.0 % classes).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1 % classes).collect();
        let cm = ConfusionMatrix::from_predictions(&truth, &pred, classes).unwrap();
        prop_assert_eq!(cm.total(), truth.len() as u64);
        for c in 0..classes {
            prop_assert_eq!(cm.row_sums()[c], truth.iter().filter(|&&t| t == c).count() as u64);
        }
        let m = metrics(&cm).unwrap();
        let (oa, aa, kappa) = brute_metrics(&truth, &pred, classes);
        prop_assert!((m.oa - oa).abs() <= 1e-10);
        prop_assert!((m.aa - aa).abs() <= 1e-10);
        prop_assert!((m.kappa - kappa).abs() <= 1e-10);
    }
}

#[test]
fn reference_matrices() {
    let m = metrics(&ConfusionMatrix::from_rows(&[vec![40, 10], vec![20, 30]]).unwrap()).unwrap();
    assert!((m.oa - 0.70).abs() <= 1e-10 && (m.aa - 0.70).abs() <= 1e-10 && (m.kappa - 0.40).abs() <= 1e-10);
    let identity: Vec<Vec<u64>> = (0..4).map(|i| (0..4).map(|j| u64::from(i == j)).collect()).collect();
    let m = metrics(&ConfusionMatrix::from_rows(&identity).unwrap()).unwrap();
    assert_eq!((m.oa, m.aa, m.kappa), (1.0, 1.0, 1.0));
}

#[test]
fn random_balanced_predictions_have_near_zero_kappa() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 10_000;
    let truth: Vec<usize> = (0..n).map(|i| i % 5).collect();
    let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
    let m = metrics(&ConfusionMatrix::from_predictions(&truth, &pred, 5).unwrap()).unwrap();
    assert!(m.kappa.abs() < 0.05, "kappa {}", m.kappa);
}

#[test]
fn prediction_ignores_test_order() {
    let data = synth_datasets(&tiny_spec(), 3);
    let cfg = tiny_pipeline();
    let out = run_pipeline(&data, &cfg, 5).unwrap();
    let (pools, _) = prepare_run(&data, &cfg, 5).unwrap();
    let class_ids = pools.labeled.class_ids();
    let protos = build_eval_prototypes(&out.params, &pools.labeled, &class_ids).unwrap();
    let patches: Vec<&Patch> = pools.test.iter().collect();
    let forward = predict(&out.params, &protos, &patches).unwrap();
    let reversed: Vec<&Patch> = patches.iter().rev().copied().collect();
    let mut backward = predict(&out.params, &protos, &reversed).unwrap();
    backward.reverse();
    assert_eq!(forward, backward);

    let e = &out.evaluation;
    assert_eq!(e.confusion.total(), pools.test.len() as u64);
    for (row, &class) in e.class_ids.iter().enumerate() {
        assert_eq!(e.confusion.row_sums()[row], pools.test.group(class).map_or(0, |g| g.len()) as u64);
    }
}

#[test]
fn missing_labeled_class_is_reported() {
    let data = synth_datasets(&tiny_spec(), 3);
    let (pools, state) = prepare_run(&data, &tiny_pipeline(), 1).unwrap();
    let mut labeled = hsi_fsl::hsi_data::SampleSet::new(pools.labeled.kind());
    for p in pools.labeled.iter().filter(|p| p.label != 2) {
        labeled.push(p.clone());
    }
    assert!(evaluate(&state.params, &labeled, &pools.test).is_err());
}

#[test]
fn repeated_eval_reports_consistent_aggregates() {
    let data = synth_datasets(&tiny_spec(), 4);
    let cfg = tiny_pipeline();
    let report = repeated_eval(&data, &cfg, 3, 42).unwrap();
    assert_eq!(report.runs.len(), 3);
    let seeds: std::collections::BTreeSet<u64> = report.runs.iter().map(|r| r.seed).collect();
    assert_eq!(seeds.len(), 3);
    let oas: Vec<f64> = report.runs.iter().map(|r| r.metrics.oa).collect();
    let mean = oas.iter().sum::<f64>() / 3.0;
    let std = (oas.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((report.oa().mean - mean).abs() <= 1e-9);
    assert!((report.oa().std - std).abs() <= 1e-9);
    let kappas: Vec<f64> = report.runs.iter().map(|r| r.metrics.kappa).collect();
    assert!((report.kappa().mean - kappas.iter().sum::<f64>() / 3.0).abs() <= 1e-9);
    assert_eq!(report, repeated_eval(&data, &cfg, 3, 42).unwrap());
    let table = report.table();
    assert!(table.contains(&report.oa().percent()));
    assert!(table.trim_end().ends_with("runs: 3"));

    let single = repeated_eval(&data, &cfg, 1, 42).unwrap();
    assert_eq!(single.oa().std, 0.0);
    assert!(single.oa().percent().ends_with("±0.00"));
    assert_eq!(single.runs[0], report.runs[0]);

    let err = repeated_eval(&data, &cfg, 0, 42).unwrap_err();
    assert!(err.partial.runs.is_empty());
}

#[test]
fn ablation_has_four_rows_sharing_seeds() {
    let data = synth_datasets(&tiny_spec(), 6);
    let cfg = tiny_pipeline();
    let rows = ablation_suite(&data, &cfg, 1, 9).unwrap();
    let labels: Vec<String> = rows.iter().map(|r| r.label()).collect();
    assert_eq!(labels, ["×/×", "✓/×", "×/✓", "✓/✓"]);
    let mut base = cfg.clone();
    base.train.use_qpl = false;
    base.train.use_mmd = false;
    let direct = run_pipeline(&data, &base, derive_seed(9, 0)).unwrap();
    assert_eq!(rows[0].report.runs[0].metrics, direct.evaluation.metrics);
    assert_eq!(ablation_table(&rows).lines().count(), 5);
}

#[test]
fn sweep_keeps_going_past_infeasible_points() {
    let data = synth_datasets(&tiny_spec(), 6);
    let cfg = tiny_pipeline();
    let points = labeled_count_sweep(&data, &cfg, &[1, 10_000, 2], 1, 3);
    assert_eq!(points.len(), 3);
    assert!(points[0].oa.is_some() && points[2].oa.is_some());
    assert!(points[1].oa.is_none() && points[1].error.is_some());
    let one = labeled_count_sweep(&data, &cfg, &[2], 1, 3);
    assert_eq!(one.len(), 1);
    assert!(one[0].error.is_none());
}

#[test]
fn more_labels_do_not_hurt_on_the_synthetic_task() {
    let mut cfg = PipelineConfig::default();
    cfg.arch = ArchConfig { mapped_dim: 40, branch_width: 20, ..ArchConfig::default() };
    cfg.train.episodes = 100;
    cfg.train.ways = 5;
    cfg.train.queries = 10;
    cfg.train.use_qpl = false;
    cfg.train.use_mmd = false;
    cfg.data.source_min_class = 100;
    cfg.data.source_per_class = 100;
    let mut monotone = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let data = synth_datasets(&SynthSpec::default(), seed);
        let points = labeled_count_sweep(&data, &cfg, &[1, 3, 5], 1, seed);
        let oa: Vec<f64> = points.iter().map(|p| p.oa.expect("feasible").mean).collect();
        monotone += usize::from(oa.windows(2).all(|w| w[1] >= w[0]));
        lines.push(format!("seed {seed}: {oa:.4?}"));
    }
    println!("{}", lines.join("\n"));
    assert!(monotone >= 2, "{}", lines.join("; "));
}
