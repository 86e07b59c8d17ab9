//! The four expert architectures, per-patch mixing and the cyclic
//! cross-variable relation layer.
//!
//! Experts operate on `[R·N × D]` matrices holding `R` independent
//! sequences of `N` patch embeddings (variable-major), and return the same
//! shape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    Identity,
    Trend,
    Seasonality,
    Fluctuation,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 4] = [
        ExpertKind::Identity,
        ExpertKind::Trend,
        ExpertKind::Seasonality,
        ExpertKind::Fluctuation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExpertKind::Identity => "identity",
            ExpertKind::Trend => "trend",
            ExpertKind::Seasonality => "seasonality",
            ExpertKind::Fluctuation => "fluctuation",
        }
    }
}

impl std::fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture hyperparameters shared by all experts of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertShape {
    pub d_model: usize,
    pub trend_window: usize,
    pub conv_kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpertParams {
    Identity {
        proj: Linear,
    },
    Trend {
        window: usize,
        hidden: Linear,
        out: Linear,
    },
    /// `freq` acts on stacked `[re | im]` bins (`2D × 2D`), `out` on
    /// `[sin Z₁ | cos Z₂]`.
    Seasonality {
        freq: Linear,
        out: Linear,
    },
    /// Kernels are `[K·D × D]`, see [`Tape::causal_conv1d`].
    Fluctuation {
        content: Linear,
        gate: Linear,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expert {
    pub id: u64,
    pub kind: ExpertKind,
    pub protected: bool,
    /// Drift event that created the expert; `None` for base experts.
    pub created_at: Option<u64>,
    pub params: ExpertParams,
}

impl Expert {
    pub fn new(
        store: &mut ParamStore,
        kind: ExpertKind,
        id: u64,
        shape: &ExpertShape,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = shape.d_model;
        let name = format!("expert{id}.{kind}");
        let params = match kind {
            ExpertKind::Identity => ExpertParams::Identity {
                proj: Linear::new(store, &format!("{name}.proj"), d, d, rng),
            },
            ExpertKind::Trend => {
                if shape.trend_window == 0 {
                    return Err(Error::Config("trend window must be positive".into()));
                }
                ExpertParams::Trend {
                    window: shape.trend_window,
                    hidden: Linear::new(store, &format!("{name}.hidden"), d, d, rng),
                    out: Linear::new(store, &format!("{name}.out"), d, d, rng),
                }
            }
            ExpertKind::Seasonality => {
                if !d.is_multiple_of(2) {
                    return Err(Error::Config(format!(
                        "seasonality expert needs an even embedding width, got {d}"
                    )));
                }
                ExpertParams::Seasonality {
                    freq: Linear::new(store, &format!("{name}.freq"), 2 * d, 2 * d, rng),
                    out: Linear::new(store, &format!("{name}.out"), d, d, rng),
                }
            }
            ExpertKind::Fluctuation => {
                let k = shape.conv_kernel;
                if k == 0 {
                    return Err(Error::Config("convolution kernel must be positive".into()));
                }
                ExpertParams::Fluctuation {
                    content: Linear::new(store, &format!("{name}.content"), k * d, d, rng),
                    gate: Linear::new(store, &format!("{name}.gate"), k * d, d, rng),
                }
            }
        };
        Ok(Self {
            id,
            kind,
            protected: true,
            created_at: None,
            params,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.params {
            ExpertParams::Identity { proj } => proj.params().to_vec(),
            ExpertParams::Trend { hidden, out, .. } => [hidden.params(), out.params()].concat(),
            ExpertParams::Seasonality { freq, out } => [freq.params(), out.params()].concat(),
            ExpertParams::Fluctuation { content, gate } => [content.params(), gate.params()].concat(),
        }
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.value(id).len()).sum()
    }

    /// Bit-exact copy under a new id, marked as a drift expert.
    pub fn duplicate(&self, store: &mut ParamStore, id: u64, event: u64) -> Self {
        let name = format!("expert{id}.{}", self.kind);
        let params = match &self.params {
            ExpertParams::Identity { proj } => ExpertParams::Identity {
                proj: proj.duplicate(store, &format!("{name}.proj")),
            },
            ExpertParams::Trend { window, hidden, out } => ExpertParams::Trend {
                window: *window,
                hidden: hidden.duplicate(store, &format!("{name}.hidden")),
                out: out.duplicate(store, &format!("{name}.out")),
            },
            ExpertParams::Seasonality { freq, out } => ExpertParams::Seasonality {
                freq: freq.duplicate(store, &format!("{name}.freq")),
                out: out.duplicate(store, &format!("{name}.out")),
            },
            ExpertParams::Fluctuation { content, gate } => ExpertParams::Fluctuation {
                content: content.duplicate(store, &format!("{name}.content")),
                gate: gate.duplicate(store, &format!("{name}.gate")),
            },
        };
        Self {
            id,
            kind: self.kind,
            protected: false,
            created_at: Some(event),
            params,
        }
    }

    /// Maps `x: [R·N × D]` to `[R·N × D]`, each block of `seq_len` rows
    /// being one sequence.
    pub fn forward(&self, tape: &mut Tape, x: Var, seq_len: usize) -> Result<Var> {
        match &self.params {
            ExpertParams::Identity { proj } => proj.forward(tape, x),
            ExpertParams::Trend { window, hidden, out } => {
                let pooled = tape.moving_average(x, (*window).min(seq_len), seq_len)?;
                let h = hidden.forward(tape, pooled)?;
                let h = tape.relu(h);
                out.forward(tape, h)
            }
            ExpertParams::Seasonality { freq, out } => {
                let z = seasonal_latent(tape, freq, x, seq_len)?;
                let d = tape.value(z).cols();
                let z1 = tape.slice_cols(z, 0, d / 2)?;
                let z2 = tape.slice_cols(z, d / 2, d)?;
                let s = tape.sin(z1);
                let c = tape.cos(z2);
                let act = tape.concat_cols(&[s, c])?;
                out.forward(tape, act)
            }
            ExpertParams::Fluctuation { content, gate } => {
                let (cw, cb) = (tape.param(content.w), tape.param(content.b));
                let (gw, gb) = (tape.param(gate.w), tape.param(gate.b));
                let c = tape.causal_conv1d(x, cw, cb, seq_len)?;
                let g = tape.causal_conv1d(x, gw, gb, seq_len)?;
                let g = tape.sigmoid(g);
                tape.mul(c, g)
            }
        }
    }
}

/// `Z = irfft(freq(rfft(x)))` along the patch axis.
pub fn seasonal_latent(tape: &mut Tape, freq: &Linear, x: Var, seq_len: usize) -> Result<Var> {
    let spec = tape.rfft_rows(x, seq_len)?;
    let spec = freq.forward(tape, spec)?;
    tape.irfft_rows(spec, seq_len)
}

/// `Σ_e g[:, e] ⊙ out_e`, skipping experts that no row activates.
/// `outputs[e]` is `None` for skipped experts.
pub fn mix(tape: &mut Tape, outputs: &[Option<Var>], gates: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (e, out) in outputs.iter().enumerate() {
        let Some(out) = *out else { continue };
        let g = tape.slice_cols(gates, e, e + 1)?;
        let term = tape.row_scale(out, g)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::Contract("no active expert".into()))
}

/// Which experts (columns of a `[rows × E]` gate matrix) have any nonzero
/// weight.
pub fn active_columns(gates: &Tensor) -> Vec<bool> {
    let e = gates.cols();
    let mut used = vec![false; e];
    for row in gates.data().chunks(e) {
        for (u, &g) in used.iter_mut().zip(row) {
            *u |= g != 0.0;
        }
    }
    used
}

/// Learnable `V × V` prototypes indexed by `origin mod L_cyc`, corrected by
/// a one-hidden-layer network of the deviation of the current cosine
/// similarity matrix from the prototype.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CyclicRelation {
    pub n_vars: usize,
    pub cycle: usize,
    /// `[L_cyc·V × V]`, slice `c` in rows `c·V .. (c+1)·V`.
    pub prototype: ParamId,
    pub hidden: Linear,
    pub out: Linear,
}

/// Diagonal value of the initial prototypes; keeps the initial mixing close
/// to the identity.
pub const PROTOTYPE_DIAG_INIT: f64 = 4.0;

impl CyclicRelation {
    pub fn new(store: &mut ParamStore, name: &str, n_vars: usize, cycle: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_vars == 0 || cycle == 0 {
            return Err(Error::Config("relation layer needs V >= 1 and L_cyc >= 1".into()));
        }
        let vv = n_vars * n_vars;
        let mut proto = Tensor::zeros(&[cycle * n_vars, n_vars]);
        for c in 0..cycle {
            for v in 0..n_vars {
                proto.data_mut()[(c * n_vars + v) * n_vars + v] = PROTOTYPE_DIAG_INIT;
            }
        }
        Ok(Self {
            n_vars,
            cycle,
            prototype: store.insert(format!("{name}.prototype"), proto),
            hidden: Linear::new(store, &format!("{name}.hidden"), vv, vv, rng),
            out: Linear::new(store, &format!("{name}.out"), vv, vv, rng),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.prototype];
        v.extend(self.hidden.params());
        v.extend(self.out.params());
        v
    }

    pub fn cycle_index(&self, origin: usize) -> usize {
        origin % self.cycle
    }

    /// Row-stochastic mixing matrix `softmax_rows(ℛ_final)` for `h`
    /// (`[V·N × D]`, variable-major).
    pub fn mixing(&self, tape: &mut Tape, h: Var, origin: usize) -> Result<Var> {
        let v = self.n_vars;
        let flat = self.flatten(tape, h)?;
        let unit = tape.row_normalize(flat);
        let unit_t = tape.transpose(unit);
        let cur = tape.matmul(unit, unit_t)?;
        let c = self.cycle_index(origin);
        let proto = tape.param(self.prototype);
        let rows: Vec<usize> = (c * v..(c + 1) * v).collect();
        let proto = tape.select_rows(proto, &rows)?;
        let delta = tape.sub(cur, proto)?;
        let delta = tape.reshape(delta, &[1, v * v])?;
        let r = self.hidden.forward(tape, delta)?;
        let r = tape.relu(r);
        let r = self.out.forward(tape, r)?;
        let r = tape.reshape(r, &[v, v])?;
        let fin = tape.add(proto, r)?;
        Ok(tape.softmax_rows(fin))
    }

    /// `H'[v] = Σ_u A[v][u]·H[u]`.
    pub fn forward(&self, tape: &mut Tape, h: Var, origin: usize) -> Result<Var> {
        let shape = tape.value(h).shape().to_vec();
        let a = self.mixing(tape, h, origin)?;
        let flat = self.flatten(tape, h)?;
        let mixed = tape.matmul(a, flat)?;
        tape.reshape(mixed, &shape)
    }

    fn flatten(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let t = tape.value(h);
        if !t.len().is_multiple_of(self.n_vars) {
            return Err(Error::Dimension(format!(
                "relation layer: {:?} does not split into {} variables",
                t.shape(),
                self.n_vars
            )));
        }
        let per = t.len() / self.n_vars;
        tape.reshape(h, &[self.n_vars, per])
    }
}

/// Row of the exported expert inventory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertInfo {
    pub id: u64,
    pub kind: ExpertKind,
    pub protected: bool,
    /// `"base"` or the id of the creating drift event.
    pub created_at: serde_json::Value,
    pub param_count: usize,
}

impl ExpertInfo {
    pub fn of(expert: &Expert, store: &ParamStore) -> Self {
        Self {
            id: expert.id,
            kind: expert.kind,
            protected: expert.protected,
            created_at: match expert.created_at {
                None => serde_json::Value::from("base"),
                Some(e) => serde_json::Value::from(e),
            },
            param_count: expert.param_count(store),
        }
    }
}
