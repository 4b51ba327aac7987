use std::fs;

use ckstn::data::{synth_generate, FeatureSet, SynthSpec};
use ckstn::eval::evaluate;
use ckstn::model::{init_model, Checkpoint, ModelConfig};
use ckstn::train::{train, TrainConfig, UnitUpdate, METRICS_HEADER};
use ckstn::{Error, Tensor};

fn small_corpus() -> (FeatureSet, FeatureSet) {
    let spec = SynthSpec {
        pairs: 24,
        seed: 3,
        ..SynthSpec::default()
    };
    synth_generate(&spec).unwrap().split(16)
}

fn short_run() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        warmup: 1,
        batch_size: 8,
        lr_low: 5e-4,
        lr_high: 5e-3,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn same_params(a: &Checkpoint, b: &Checkpoint) -> bool {
    a.params.tensors() == b.params.tensors() && a.units == b.units
}

#[test]
fn zero_epochs_returns_initialization() {
    let (tr, te) = small_corpus();
    let model = ModelConfig::toy();
    let cfg = TrainConfig {
        epochs: 0,
        warmup: 0,
        ..short_run()
    };
    let out = train(&model, &cfg, &tr, &te, None).unwrap();
    let (params, units) = init_model(&model, cfg.seed).unwrap();
    assert_eq!(out.last.params.tensors(), params.tensors());
    assert_eq!(out.last.units, units);
    assert!(same_params(&out.best, &out.last));
    assert_eq!(out.metrics.len(), 1);
}

#[test]
fn fixed_seed_gives_identical_metrics_and_weights() {
    let (tr, te) = small_corpus();
    let model = ModelConfig::toy();
    let a = train(&model, &short_run(), &tr, &te, None).unwrap();
    let b = train(&model, &short_run(), &tr, &te, None).unwrap();
    let csv = |o: &ckstn::train::TrainOutcome| o.metrics.iter().map(|r| r.csv()).collect::<Vec<_>>();
    assert_eq!(csv(&a), csv(&b));
    assert!(same_params(&a.last, &b.last));

    let other = train(&model, &TrainConfig { seed: 6, ..short_run() }, &tr, &te, None).unwrap();
    assert_ne!(csv(&a), csv(&other));
}

#[test]
fn output_directory_contents() {
    let (tr, te) = small_corpus();
    let model = ModelConfig::toy();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&model, &short_run(), &tr, &te, Some(dir.path())).unwrap();

    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 1 + 3);
    assert!(lines[1].starts_with("0,"));

    let last = Checkpoint::load(&dir.path().join("checkpoint-final")).unwrap();
    assert!(same_params(&last, &out.last));
    let best = Checkpoint::load(&dir.path().join("checkpoint-best")).unwrap();
    assert!(same_params(&best, &out.best));
    let best_rsum = out.metrics[out.best_epoch].rsum;
    assert!(out.metrics.iter().all(|r| r.rsum <= best_rsum));
    assert!(out.metrics[..out.best_epoch].iter().all(|r| r.rsum < best_rsum));

    let pairs = te.paired_inputs(model.tokens).unwrap();
    let reloaded = evaluate(&last.config, &last.params, &last.units, &pairs).unwrap();
    assert_eq!(reloaded, out.report);
    assert!(!dir.path().join("nan_dump.json").exists());
}

#[test]
fn losses_decrease_over_a_short_run() {
    let (tr, te) = small_corpus();
    let cfg = TrainConfig {
        epochs: 6,
        warmup: 2,
        ..short_run()
    };
    let out = train(&ModelConfig::toy(), &cfg, &tr, &te, None).unwrap();
    let (first, last) = (&out.metrics[0], out.metrics.last().unwrap());
    assert!(last.l_all < first.l_all, "{} -> {}", first.l_all, last.l_all);
    for row in &out.metrics {
        assert!((row.l_all - row.l_con - row.l_kl).abs() < 1e-12);
    }
}

#[test]
fn per_pair_unit_updates_and_contrastive_off() {
    let (tr, te) = small_corpus();
    let cfg = TrainConfig {
        unit_update: UnitUpdate::PerPair,
        contrastive: false,
        ..short_run()
    };
    let out = train(&ModelConfig::toy(), &cfg, &tr, &te, None).unwrap();
    // two epochs of 16 pairs, one unit update per pair
    assert_eq!(out.last.units.step, 32);
    assert!(out.metrics.iter().all(|r| r.l_con > 0.0));
    let per_batch = train(&ModelConfig::toy(), &short_run(), &tr, &te, None).unwrap();
    assert_eq!(per_batch.last.units.step, 4);
}

#[test]
fn overflowing_features_abort_with_dump() {
    let (mut tr, te) = small_corpus();
    let item = &mut tr.items[0];
    item.features = Tensor::filled(item.features.rows(), item.features.cols(), 1e300);
    let dir = tempfile::tempdir().unwrap();
    let err = train(&ModelConfig::toy(), &short_run(), &tr, &te, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Numeric { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
    let dump: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("nan_dump.json")).unwrap()).unwrap();
    assert!(dump.is_object());
}

#[test]
fn invalid_schedule_is_rejected() {
    let (tr, te) = small_corpus();
    let cfg = TrainConfig {
        epochs: 5,
        warmup: 5,
        ..short_run()
    };
    let err = train(&ModelConfig::toy(), &cfg, &tr, &te, None).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}
