//! Training loop, evaluation and model-level behavior on small synthetic data.

use std::sync::Arc;

use mhgnet::data::{synthesize, SplitRatios};
use mhgnet::dstgg::GraphMode;
use mhgnet::model::{ForecastModel, ModelConfig};
use mhgnet::train_eval::{evaluate, prepare, train, Schedule, Splits, TrainOptions};

fn small_config(patterns: usize) -> ModelConfig {
    ModelConfig {
        nodes: 8,
        patterns,
        width: 4,
        node_width: 3,
        time_width: 3,
        history: 4,
        horizon: 3,
        top_k: 3,
        seed: 2,
        ..ModelConfig::default()
    }
}

fn small_data() -> Splits {
    let syn = synthesize(8, 2, 2, 4).unwrap();
    prepare(Arc::new(syn.series), 4, 3, SplitRatios::new(0.6, 0.2, 0.2)).unwrap()
}

fn options(epochs: usize) -> TrainOptions {
    TrainOptions {
        epochs,
        batch_size: 64,
        seed: 2,
        schedule: Schedule {
            warmup_epochs: 1,
            curriculum_length: 1,
            max_horizon: 3,
            ..Schedule::default()
        },
        ..TrainOptions::default()
    }
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let data = small_data();
    let mut model = ForecastModel::new(small_config(2)).unwrap();
    let before = model.checkpoint_bytes();
    let log = train(&mut model, &data, &options(0)).unwrap();
    assert!(log.epochs.is_empty());
    assert!(log.best().is_none());
    assert_eq!(model.checkpoint_bytes(), before);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = small_data();
    let run = |seed| {
        let mut model = ForecastModel::new(ModelConfig { seed, ..small_config(2) }).unwrap();
        let log = train(&mut model, &data, &TrainOptions { seed, ..options(2) }).unwrap();
        (model.checkpoint_bytes(), log.epochs[0].train_mae)
    };
    let (a, la) = run(2);
    let (b, lb) = run(2);
    assert_eq!(a, b);
    assert_eq!(la.to_bits(), lb.to_bits());
    let (c, _) = run(3);
    assert_ne!(a, c);
}

#[test]
fn training_reduces_validation_error() {
    let data = small_data();
    let mut model = ForecastModel::new(small_config(2)).unwrap();
    let log = train(&mut model, &data, &options(8)).unwrap();
    let first = log.epochs[0].val_mae;
    let best = log.best().unwrap();
    assert!(best.val_mae < first, "{first} -> {}", best.val_mae);
    let report = evaluate(&model, &data.val, &data.scaler, 64).unwrap();
    assert!((report.average.mae - best.val_mae).abs() < 1e-9);
}

#[test]
fn evaluation_is_deterministic_and_skips_dropout() {
    let data = small_data();
    let model = ForecastModel::new(small_config(2)).unwrap();
    let a = evaluate(&model, &data.test, &data.scaler, 7).unwrap();
    let b = evaluate(&model, &data.test, &data.scaler, 64).unwrap();
    assert!((a.average.mae - b.average.mae).abs() < 1e-9);
    assert_eq!(a.per_horizon.len(), 3);
}

#[test]
fn cluster_refresh_is_deterministic() {
    let data = small_data();
    let mut a = ForecastModel::new(small_config(3)).unwrap();
    let mut b = ForecastModel::new(small_config(3)).unwrap();
    let ta = a.refresh_clusters(&data.train, &data.scaler).unwrap().clone();
    let tb = b.refresh_clusters(&data.train, &data.scaler).unwrap().clone();
    assert_eq!(ta, tb);
    assert_eq!(ta.pools.len(), 3);
}

#[test]
fn single_pool_without_clustering_or_with_one_pattern() {
    let data = small_data();
    let time = data.test.batch(&[0], &data.scaler).time;
    for cfg in [small_config(1), ModelConfig { clustering: false, ..small_config(2) }] {
        let mut model = ForecastModel::new(cfg).unwrap();
        model.refresh_clusters(&data.train, &data.scaler).unwrap();
        let graphs = model.subgraphs(&time).unwrap();
        assert_eq!(graphs.len(), 1);
    }
}

#[test]
fn graph_modes_produce_different_subgraphs() {
    let data = small_data();
    let time = data.test.batch(&[0], &data.scaler).time;
    let dump = |mode| {
        let model = ForecastModel::new(ModelConfig { graph_mode: mode, ..small_config(2) }).unwrap();
        model.subgraphs(&time).unwrap().iter().flat_map(|g| g.triples()).collect::<Vec<_>>()
    };
    let spatial_only = dump(GraphMode::NoTemporal);
    let temporal_only = dump(GraphMode::NoSpatial);
    assert_ne!(spatial_only, temporal_only);
    for (_, _, w) in spatial_only.iter().chain(&temporal_only) {
        assert!((0.0..=1.0).contains(w));
    }
}
