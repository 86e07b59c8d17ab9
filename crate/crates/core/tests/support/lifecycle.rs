#![allow(dead_code)]

//! Scripted run with forced drift events and a hand-fed usage history.

use std::collections::BTreeSet;

use driftmoe::data::Split;
use driftmoe::drift::DriftEvent;
use driftmoe::manager::{on_drift, prune, Action, DriftContext};
use driftmoe::model::Model;

use crate::support::{mean_shift_stream, micro_config};

pub const POOL_CAP: usize = 3;
pub const PATIENCE: usize = 3;

/// Outcome of each invariant, by name.
pub struct Checks(pub Vec<(&'static str, bool)>);

impl Checks {
    fn record(&mut self, name: &'static str, ok: bool) {
        match self.0.iter_mut().find(|(n, _)| *n == name) {
            Some((_, v)) => *v &= ok,
            None => self.0.push((name, ok)),
        }
    }

    pub fn all(&self) -> bool {
        self.0.iter().all(|&(_, ok)| ok)
    }
}

fn forced_event(i: usize) -> DriftEvent {
    let start = 100 * i;
    DriftEvent {
        t: start + 191,
        score: 1.0,
        threshold: 0.5,
        reference: (start, start + 96),
        current: (start + 96, start + 192),
    }
}

pub fn forced_drift_run(seed: u64) -> Checks {
    let mut cfg = micro_config(seed);
    cfg.moe_layers = 2;
    cfg.manager.pool_cap = POOL_CAP;
    cfg.manager.patience = PATIENCE;
    cfg.manager.align_steps = 5;
    let ds = mean_shift_stream(seed, 2, 1200, 500, 3.0);
    cfg.n_vars = ds.n_vars();
    let mut model = Model::new(cfg.clone()).unwrap();
    let origins: Vec<usize> = ds
        .window_origins(Split::Train, cfg.lookback, cfg.horizon)
        .unwrap()
        .collect();
    let ctx = DriftContext {
        dataset: &ds,
        origins: &origins,
        training: true,
    };
    let base: Vec<usize> = model.layers().iter().map(|l| l.pool.base_count()).collect();
    let mut c = Checks(Vec::new());

    for i in 0..5 {
        let head: BTreeSet<_> = model.head_params().into_iter().collect();
        let frozen: Vec<_> = model.store.ids().filter(|id| !head.contains(id)).collect();
        let before = model.store.digest_of(frozen.iter().copied());
        let drift_before: Vec<usize> = model.layers().iter().map(|l| l.pool.drift_count()).collect();

        let out = on_drift(&mut model, &forced_event(i), &ctx).unwrap();

        c.record(
            "frozen parameters untouched by alignment",
            model.store.digest_of(frozen) == before,
        );
        for (l, layer) in model.layers().iter().enumerate() {
            c.record("pool never exceeds cap", layer.pool.drift_count() <= POOL_CAP);
            c.record("base experts unchanged", layer.pool.base_count() == base[l]);
            let expect_add = drift_before[l] < POOL_CAP;
            let action = out.records.iter().find(|r| r.layer == l).map(|r| r.action);
            let want = if expect_add {
                Action::Added
            } else {
                Action::SkippedPoolFull
            };
            c.record("adds while room, skips when full", action == Some(want));
        }
        c.record(
            "alignment ran when experts were added",
            out.alignment.is_empty() == drift_before.iter().all(|&d| d >= POOL_CAP),
        );
    }

    // usage: two quiet windows, one busy, then quiet ones
    let victim = *model.layers()[0]
        .pool
        .experts
        .iter()
        .find(|e| !e.protected)
        .map(|e| &e.id)
        .unwrap();
    let protected_id = model.layers()[0].pool.experts[0].id;
    let pattern = [0.0, 0.0, 0.5, 0.0, 0.0, 0.0];
    let mut pruned_at = None;
    for (w, &m) in pattern.iter().enumerate() {
        let pool = model.layers()[0].pool.clone();
        let means: Vec<(u64, f64)> = pool
            .ids()
            .into_iter()
            .map(|id| (id, if id == victim { m } else { 0.0 }))
            .collect();
        model.structure.layers[0]
            .usage
            .track_window(&means, |id| pool.get(id).is_none_or(|e| e.protected));
        match prune(&mut model, 0, victim, w) {
            Ok(_) => {
                pruned_at = Some(w);
                break;
            }
            Err(_) => continue,
        }
    }
    // windows 3, 4, 5 are the first three consecutive quiet ones
    c.record("pruning waits for patience", pruned_at == Some(5));
    c.record(
        "base experts are never pruned",
        prune(&mut model, 0, protected_id, 99).is_err(),
    );

    for (l, layer) in model.layers().iter().enumerate() {
        let count = |a: Action| model.events().iter().filter(|r| r.layer == l && r.action == a).count();
        c.record(
            "pool size equals adds minus prunes",
            layer.pool.drift_count() == count(Action::Added) - count(Action::Pruned),
        );
        c.record("head rows track the pool", layer.router.head.len() == layer.pool.len());
    }
    let ids: Vec<u64> = model.events().iter().map(|r| r.event_id).collect();
    c.record("event ids never decrease", ids.windows(2).all(|w| w[0] <= w[1]));
    c
}
