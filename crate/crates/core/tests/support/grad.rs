#![allow(dead_code)]

//! Finite-difference checks for every learnable block of the model.

use driftmoe::experts::{CyclicRelation, Expert, ExpertKind, ExpertShape};
use driftmoe::nn::Linear;
use driftmoe::router::{fuse_with_memory, AnomalyRepository, GruCell};
use driftmoe::ParamStore;

use crate::support::{fd_check, micro_model, random, rng, weighted_sum, FdResult};

pub const COMPONENT_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

pub struct Case {
    pub name: String,
    pub tol: f64,
    pub result: FdResult,
}

fn expert_case(kind: ExpertKind, seed: u64) -> Case {
    let mut r = rng(seed);
    let (n, d) = (5, 4);
    let mut store = ParamStore::new();
    let shape = ExpertShape {
        d_model: d,
        trend_window: 3,
        conv_kernel: 3,
    };
    let e = Expert::new(&mut store, kind, 0, &shape, &mut r).unwrap();
    // two channels of five patches each
    let x = random(&[2 * n, d], &mut r);
    let w = random(&[2 * n, d], &mut r);
    let result = fd_check(&store, &e.param_ids(), &[x], |tape, v| {
        let y = e.forward(tape, v[0], n).unwrap();
        weighted_sum(tape, y, &w)
    });
    Case {
        name: format!("{kind} expert"),
        tol: COMPONENT_TOL,
        result,
    }
}

fn gru_case(seed: u64) -> Case {
    let mut r = rng(seed);
    let d = 4;
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", d, &mut r);
    let x = random(&[3, d], &mut r);
    let h = random(&[3, d], &mut r);
    let w = random(&[3, d], &mut r);
    let result = fd_check(&store, &cell.params(), &[x, h], |tape, v| {
        // two steps so the gradient also flows through the recurrence
        let h1 = cell.step(tape, v[0], v[1]).unwrap();
        let h2 = cell.step(tape, v[0], h1).unwrap();
        weighted_sum(tape, h2, &w)
    });
    Case {
        name: "GRU cell".into(),
        tol: COMPONENT_TOL,
        result,
    }
}

fn fusion_case(seed: u64) -> Case {
    let mut r = rng(seed);
    let d = 4;
    let mut store = ParamStore::new();
    let fusion = Linear::new(&mut store, "fusion", 2 * d, 1, &mut r);
    let mut repo = AnomalyRepository::new(4);
    for e in 0..3 {
        repo.archive(random(&[1, d], &mut r).data(), e);
    }
    let h = random(&[3, d], &mut r);
    let w = random(&[3, d], &mut r);
    let result = fd_check(&store, &fusion.params(), &[h], |tape, v| {
        let y = fuse_with_memory(tape, &fusion, &repo, v[0]).unwrap();
        weighted_sum(tape, y, &w)
    });
    Case {
        name: "memory fusion gate".into(),
        tol: COMPONENT_TOL,
        result,
    }
}

fn relation_case(seed: u64) -> Case {
    let mut r = rng(seed);
    let (v, n, d) = (3, 2, 4);
    let mut store = ParamStore::new();
    let rel = CyclicRelation::new(&mut store, "rel", v, 5, &mut r).unwrap();
    // keep the prototype small so the softmax is not saturated
    for x in store.value_mut(rel.prototype).data_mut() {
        *x *= 0.25;
    }
    let h = random(&[v * n, d], &mut r);
    let w = random(&[v * n, d], &mut r);
    let result = fd_check(&store, &rel.param_ids(), &[h], |tape, x| {
        let y = rel.forward(tape, x[0], 7).unwrap();
        weighted_sum(tape, y, &w)
    });
    Case {
        name: "cyclic relation layer".into(),
        tol: COMPONENT_TOL,
        result,
    }
}

fn end_to_end_case(seed: u64) -> Case {
    let mut model = micro_model(seed);
    let mut r = rng(seed + 100);
    let cfg = model.config().clone();
    // a populated repository exercises the fusion path as well
    for e in 0..2 {
        model.structure.layers[0]
            .router
            .repo
            .archive(random(&[1, cfg.d_hidden], &mut r).data(), e);
    }
    let x = random(&[cfg.lookback, cfg.n_vars], &mut r);
    let y = random(&[cfg.horizon, cfg.n_vars], &mut r);
    let ids: Vec<_> = model.store.ids().collect();
    let result = fd_check(&model.store, &ids, &[], |tape, _| {
        let f = model.forward(tape, &x, 37).unwrap();
        let target = tape.constant(y.clone());
        tape.mse(f.pred, target).unwrap()
    });
    Case {
        name: "end-to-end micro model".into(),
        tol: END_TO_END_TOL,
        result,
    }
}

/// Every case for one seed.
pub fn suite(seed: u64) -> Vec<Case> {
    let mut cases: Vec<Case> = ExpertKind::ALL.iter().map(|&k| expert_case(k, seed)).collect();
    cases.push(gru_case(seed));
    cases.push(fusion_case(seed));
    cases.push(relation_case(seed));
    cases.push(end_to_end_case(seed));
    cases
}
