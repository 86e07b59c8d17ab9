use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `y = x·W + b` with `W: [in × out]`, `b: [1 × out]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.insert_uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng);
        let b = store.insert_uniform(format!("{name}.b"), &[1, fan_out], fan_in, rng);
        Self { w, b }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.insert(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    /// Copies this layer's values into fresh parameters.
    pub fn duplicate(&self, store: &mut ParamStore, name: &str) -> Self {
        let w = store.value(self.w).clone();
        let b = store.value(self.b).clone();
        Self {
            w: store.insert(format!("{name}.w"), w),
            b: store.insert(format!("{name}.b"), b),
        }
    }
}
