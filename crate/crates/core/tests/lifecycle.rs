mod support;

#[path = "support/lifecycle.rs"]
mod scripted;

use driftmoe::data::Split;
use driftmoe::drift::DriftEvent;
use driftmoe::manager::{align_new_experts, on_drift, DriftContext};
use driftmoe::model::{evaluate, read_checkpoint, train, write_checkpoint, Model};
use driftmoe::router::RouterKind;
use support::{mean_shift_stream, micro_config, stationary_stream};

#[test]
fn forced_drifts_keep_the_pool_consistent() {
    for seed in 0..3 {
        let checks = scripted::forced_drift_run(seed);
        for (name, ok) in &checks.0 {
            assert!(ok, "seed {seed}: {name}");
        }
    }
}

fn shifted_setup(seed: u64) -> (Model, driftmoe::data::SeriesDataset, Vec<usize>) {
    let ds = mean_shift_stream(seed, 2, 1200, 500, 3.0);
    let mut cfg = micro_config(seed);
    cfg.n_vars = 2;
    let model = Model::new(cfg.clone()).unwrap();
    let origins = ds
        .window_origins(Split::Train, cfg.lookback, cfg.horizon)
        .unwrap()
        .collect();
    (model, ds, origins)
}

#[test]
fn zero_alignment_steps_change_nothing() {
    let (mut model, ds, origins) = shifted_setup(0);
    let before = model.store.digest();
    let ids: Vec<_> = model.layers()[0].pool.experts[0].param_ids();
    let losses = align_new_experts(&mut model, &ids, &ds, &origins[..16], 0, 1e-3).unwrap();
    assert!(losses.is_empty());
    assert_eq!(model.store.digest(), before);
}

#[test]
fn alignment_reduces_loss_on_the_drift_windows() {
    let mut improved = 0;
    for seed in 0..5 {
        let (mut model, ds, origins) = shifted_setup(seed);
        let mut cfg = model.config().clone();
        cfg.manager.align_steps = 50;
        model.structure.config = cfg;
        let event = DriftEvent {
            t: 595,
            score: 1.0,
            threshold: 0.5,
            reference: (404, 500),
            current: (500, 596),
        };
        let ctx = DriftContext {
            dataset: &ds,
            origins: &origins,
            training: true,
        };
        let out = on_drift(&mut model, &event, &ctx).unwrap();
        assert_eq!(out.alignment.len(), 51);
        if out.alignment.last() <= out.alignment.first() {
            improved += 1;
        }
    }
    assert!(improved >= 4, "alignment improved in only {improved}/5 seeds");
}

#[test]
fn drift_handling_is_refused_outside_training() {
    let (mut model, ds, origins) = shifted_setup(1);
    let event = DriftEvent {
        t: 300,
        score: 1.0,
        threshold: 0.5,
        reference: (100, 196),
        current: (196, 292),
    };
    let ctx = DriftContext {
        dataset: &ds,
        origins: &origins,
        training: false,
    };
    assert!(on_drift(&mut model, &event, &ctx).is_err());
    assert!(model.events().is_empty());
}

fn trained(seed: u64, epochs: usize) -> (Model, driftmoe::data::SeriesDataset, driftmoe::model::TrainReport) {
    let (mut model, ds, _) = shifted_setup(seed);
    let mut cfg = model.config().clone();
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 32;
    cfg.detector.ref_size = 48;
    cfg.detector.cur_size = 48;
    cfg.manager.align_steps = 5;
    cfg.manager.window_steps = 5;
    model.structure.config = cfg;
    let report = train(&mut model, &ds).unwrap();
    (model, ds, report)
}

#[test]
fn evaluation_is_pure_and_repeatable() {
    let (model, ds, _) = trained(0, 2);
    let before = model.store.digest();
    let a = evaluate(&model, &ds, Split::Test).unwrap();
    let b = evaluate(&model, &ds, Split::Test).unwrap();
    assert_eq!(model.store.digest(), before);
    assert_eq!(a, b);
    let n = ds.window_origins(Split::Test, 16, 8).unwrap().count();
    assert_eq!(a.n_windows, n);
}

#[test]
fn checkpoint_roundtrip_preserves_metrics() {
    let (model, ds, report) = trained(1, 3);
    assert!(!model.events().is_empty(), "shifted stream should trigger the detector");
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back.store.digest(), model.store.digest());
    assert_eq!(back.events(), model.events());
    let a = evaluate(&model, &ds, Split::Val).unwrap();
    let b = evaluate(&back, &ds, Split::Val).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.mse, report.loss_curve[report.best_epoch].val_mse);
}

#[test]
fn training_stops_within_patience_of_the_best_epoch() {
    let (mut model, ds, _) = shifted_setup(2);
    let mut cfg = model.config().clone();
    cfg.train.epochs = 60;
    cfg.train.patience = 2;
    cfg.train.lr = 5e-2;
    cfg.train.adapt = false;
    model.structure.config = cfg;
    let report = train(&mut model, &ds).unwrap();
    assert!(report.epochs_run <= report.best_epoch + 1 + 2);
    if report.stopped_early {
        assert_eq!(report.epochs_run, report.best_epoch + 1 + 2);
    }
    let best = report
        .loss_curve
        .iter()
        .map(|e| e.val_mse)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(report.loss_curve[report.best_epoch].val_mse, best);
    assert_eq!(evaluate(&model, &ds, Split::Val).unwrap().mse, best);
}

#[test]
fn disabled_adaptation_leaves_the_pool_alone() {
    let (mut model, ds, _) = shifted_setup(3);
    let mut cfg = model.config().clone();
    cfg.train.epochs = 2;
    cfg.train.adapt = false;
    cfg.detector.ref_size = 48;
    cfg.detector.cur_size = 48;
    model.structure.config = cfg;
    let report = train(&mut model, &ds).unwrap();
    assert!(model.events().is_empty());
    assert!(report.detector.is_empty());
    assert_eq!(model.drift_expert_count(), 0);
}

/// Fraction of adjacent patches whose top expert differs, over the test
/// windows of every variable.
fn switch_rate(model: &Model, ds: &driftmoe::data::SeriesDataset) -> f64 {
    let cfg = model.config();
    let n = cfg.n_patches().unwrap();
    let (mut switches, mut pairs) = (0usize, 0usize);
    for o in ds.window_origins(Split::Test, cfg.lookback, cfg.horizon).unwrap() {
        let w = ds.window_at(o, cfg.lookback, cfg.horizon);
        let (_, gates) = model.predict_with_gates(&w.input, o).unwrap();
        let g = &gates[0];
        let top = |r: usize| {
            let row = g.row(r);
            (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
        };
        for v in 0..cfg.n_vars {
            for p in 1..n {
                switches += usize::from(top(v * n + p) != top(v * n + p - 1));
                pairs += 1;
            }
        }
    }
    switches as f64 / pairs as f64
}

#[test]
fn recurrent_routing_switches_no_more_than_stateless() {
    let (mut gru, mut stateless) = (0.0, 0.0);
    for seed in 0..5 {
        let ds = stationary_stream(seed, 2, 1500);
        for kind in [RouterKind::Gru, RouterKind::Stateless] {
            let mut cfg = micro_config(seed);
            cfg.n_vars = 2;
            cfg.lookback = 48;
            cfg.router = kind;
            cfg.top_k = 1;
            cfg.train.epochs = 3;
            cfg.train.adapt = false;
            let mut model = Model::new(cfg).unwrap();
            train(&mut model, &ds).unwrap();
            let r = switch_rate(&model, &ds);
            match kind {
                RouterKind::Gru => gru += r / 5.0,
                RouterKind::Stateless => stateless += r / 5.0,
            }
        }
    }
    println!("switch rate: gru {gru:.4} stateless {stateless:.4}");
    assert!(gru <= stateless, "gru {gru} > stateless {stateless}");
}
