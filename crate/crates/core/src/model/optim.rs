use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{ParamGrads, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Adam with decoupled weight decay. Moments and step counts are kept per
/// parameter, so parameters created mid-training get their own bias
/// correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Updates every parameter in `ids`. A parameter without a gradient
    /// entry is treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, ids: impl IntoIterator<Item = ParamId>) {
        let (b1, b2) = (self.beta1, self.beta2);
        for id in ids {
            let p = store.value_mut(id).data_mut();
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - b1.powi(st.step as i32);
            let bc2 = 1.0 - b2.powi(st.step as i32);
            let g = grads.get(id);
            let decay = 1.0 - self.lr * self.weight_decay;
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
                let mh = st.m[i] / bc1;
                let vh = st.v[i] / bc2;
                p[i] = p[i] * decay - self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    pub fn forget(&mut self, id: ParamId) {
        self.state.remove(&id);
    }

    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        self.state.retain(|&id, _| keep(id));
    }
}
