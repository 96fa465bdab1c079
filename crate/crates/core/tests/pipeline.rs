//! End-to-end runs through the public API on small generated data.

use dynvfl::data::{generate_synthetic, kfold_split, Dataset, SyntheticSpec};
use dynvfl::federation::report::{read_rows_csv, rows_for_run, rows_for_static, write_rows_csv};
use dynvfl::federation::{run_dynamic, run_static, DatasetPreset, PipelineConfig, Scenario, Strategy, StreamMode};
use dynvfl::training::derive_seed;

fn cfg(seed: u64) -> PipelineConfig {
    PipelineConfig {
        rep_dim: 6,
        ae_hidden: 10,
        ren_hidden: vec![8],
        perturber_hidden: 8,
        classifier_hidden: 8,
        ae_epochs: 3,
        ren_epochs: 3,
        perturber_epochs: 3,
        classifier_epochs: 10,
        batch_size: 32,
        lr: 0.05,
        seed,
        ..PipelineConfig::preset(DatasetPreset::Synthetic)
    }
}

fn data() -> Dataset {
    generate_synthetic(&SyntheticSpec {
        samples: 300,
        features: 8,
        seed: 11,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

const ALL: [Strategy; 4] = [Strategy::Distill, Strategy::Retrain, Strategy::Finetune, Strategy::Joint];

#[test]
fn dynamic_run_is_reproducible() {
    let d = data();
    let c = cfg(3);
    let scenario = Scenario::dynamic(&d, StreamMode::Random, 3, &c).unwrap();
    let a = run_dynamic(&c, &scenario, &ALL).unwrap();
    let b = run_dynamic(&c, &scenario, &ALL).unwrap();
    assert_eq!(a.records.len(), b.records.len());
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.report.confusion, y.report.confusion);
        assert_eq!(x.report.macro_f1.to_bits(), y.report.macro_f1.to_bits());
        let bits = |t: &[f64]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.loss_trace), bits(&y.loss_trace));
    }
    let digests = |o: &dynvfl::federation::RunOutcome| o.messages.iter().map(|m| m.digest.clone()).collect::<Vec<_>>();
    assert_eq!(digests(&a), digests(&b));
}

#[test]
fn every_strategy_reports_every_timestamp_from_a_shared_start() {
    let d = data();
    let c = cfg(5);
    let t_max = 3;
    let scenario = Scenario::dynamic(&d, StreamMode::AscVsDes, t_max, &c).unwrap();
    let out = run_dynamic(&c, &scenario, &ALL).unwrap();
    assert_eq!(out.records.len(), (t_max + 1) * ALL.len());
    let first = &out.record(Strategy::Distill, 0).unwrap().report;
    for s in ALL {
        for t in 0..=t_max {
            let r = out.record(s, t).unwrap_or_else(|| panic!("{} at {t} missing", s.name()));
            assert!((0.0..=1.0).contains(&r.report.macro_f1));
        }
        assert_eq!(out.record(s, 0).unwrap().report.confusion, first.confusion);
    }
    // Joint trains on everything seen so far, so its row count never shrinks.
    let joint: Vec<usize> = (0..=t_max).map(|t| out.record(Strategy::Joint, t).unwrap().train_rows).collect();
    assert!(joint.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn keys_and_models_stay_with_their_owners() {
    let d = data();
    let c = cfg(7);
    let scenario = Scenario::dynamic(&d, StreamMode::Uniform, 2, &c).unwrap();
    let out = run_dynamic(&c, &scenario, &[Strategy::Distill]).unwrap();
    assert!(!out.privacy.party_a_holds_private_key);
    assert!(!out.privacy.party_b_holds_estimator);
    assert!(out.inventory_a.holds_labels && !out.inventory_b.holds_labels);
    assert!(out.inventory_a.holds_classifier && !out.inventory_b.holds_classifier);
    assert!(out.inventory_b.holds_perturber && !out.inventory_a.holds_perturber);
    assert_eq!(out.privacy.messages, out.messages.len());
}

#[test]
fn static_fold_rows_round_trip_through_csv() {
    let d = data();
    let c = cfg(9);
    let folds = kfold_split(&d.labels, d.class_count, 3, derive_seed(c.seed, "folds")).unwrap();
    let scenario = Scenario::static_fold(&d, &folds[1], 1).unwrap();
    let out = run_static(&c, &scenario).unwrap();
    let rows = rows_for_static(&out);
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.fold == 1));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.csv");
    write_rows_csv(&rows, &path).unwrap();
    let back = read_rows_csv(&path).unwrap();
    assert_eq!(back.len(), rows.len());
    for (x, y) in rows.iter().zip(&back) {
        assert_eq!(x.strategy, y.strategy);
        assert!((x.macro_f1 - y.macro_f1).abs() < 1e-12);
    }
    assert_eq!(rows_for_run(&out.federated).len(), 1);
}

#[test]
fn static_scenarios_refuse_streams() {
    let d = data();
    let c = cfg(1);
    let scenario = Scenario::dynamic(&d, StreamMode::Uniform, 2, &c).unwrap();
    assert!(run_static(&c, &scenario).is_err());
}
