//! Recurrent top-k router with a memory of hidden states archived at drift
//! events.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// GRU cell over already-projected inputs of width `d_h`.
///
/// `z = σ(x·Wxz + h·Whz + bz)`, `r = σ(x·Wxr + h·Whr + br)`,
/// `n = tanh(x·Wxn + (r⊙h)·Whn + bn)`, `h' = (1 − z)⊙n + z⊙h`.
/// The z, r and n blocks are stored side by side in `wx` and `b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruCell {
    pub hidden: usize,
    pub wx: ParamId,
    pub wh_zr: ParamId,
    pub wh_n: ParamId,
    pub b: ParamId,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, rng: &mut impl Rng) -> Self {
        let fan = 2 * hidden;
        Self {
            hidden,
            wx: store.insert_uniform(format!("{name}.wx"), &[hidden, 3 * hidden], fan, rng),
            wh_zr: store.insert_uniform(format!("{name}.wh_zr"), &[hidden, 2 * hidden], fan, rng),
            wh_n: store.insert_uniform(format!("{name}.wh_n"), &[hidden, hidden], fan, rng),
            b: store.insert_uniform(format!("{name}.b"), &[1, 3 * hidden], fan, rng),
        }
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.wx, self.wh_zr, self.wh_n, self.b]
    }

    /// One step for a batch of rows: `x`, `h` are `[R × d_h]`.
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let d = self.hidden;
        let (wx, wh_zr, wh_n, b) = (
            tape.param(self.wx),
            tape.param(self.wh_zr),
            tape.param(self.wh_n),
            tape.param(self.b),
        );
        let gx = tape.matmul(x, wx)?;
        let gx = tape.add_row(gx, b)?;
        let gh = tape.matmul(h, wh_zr)?;
        let gx_zr = tape.slice_cols(gx, 0, 2 * d)?;
        let zr = tape.add(gx_zr, gh)?;
        let zr = tape.sigmoid(zr);
        let z = tape.slice_cols(zr, 0, d)?;
        let r = tape.slice_cols(zr, d, 2 * d)?;
        let rh = tape.mul(r, h)?;
        let nh = tape.matmul(rh, wh_n)?;
        let gx_n = tape.slice_cols(gx, 2 * d, 3 * d)?;
        let n = tape.add(gx_n, nh)?;
        let n = tape.tanh(n);
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchivedState {
    pub event_id: u64,
    pub state: Vec<f64>,
}

/// Bounded FIFO of hidden states archived at drift events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRepository {
    capacity: usize,
    entries: VecDeque<ArchivedState>,
}

impl AnomalyRepository {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ArchivedState> {
        self.entries.iter()
    }

    pub fn archive(&mut self, state: &[f64], event_id: u64) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(ArchivedState {
            event_id,
            state: state.to_vec(),
        });
    }

    /// Stored states as an `[m × d_h]` matrix.
    pub fn matrix(&self) -> Option<Tensor> {
        let first = self.entries.front()?;
        let data = self.entries.iter().flat_map(|e| e.state.iter().copied()).collect();
        Some(Tensor::new(&[self.entries.len(), first.state.len()], data).expect("uniform state width"))
    }
}

/// Rows `[R × d_h]` of hidden states blended with their cosine-attention
/// readout from the repository. An empty repository returns `h` itself.
pub fn fuse_with_memory(tape: &mut Tape, fusion: &Linear, repo: &AnomalyRepository, h: Var) -> Result<Var> {
    let Some(mem) = repo.matrix() else {
        return Ok(h);
    };
    let mut unit = mem.clone();
    for row in unit.data_mut().chunks_mut(mem.cols()) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    let unit_t = tape.constant(unit.transpose());
    let mem = tape.constant(mem);
    let hn = tape.row_normalize(h);
    let cos = tape.matmul(hn, unit_t)?;
    let attn = tape.softmax_rows(cos);
    let h_ref = tape.matmul(attn, mem)?;
    let both = tape.concat_cols(&[h, h_ref])?;
    let alpha = fusion.forward(tape, both)?;
    let alpha = tape.sigmoid(alpha);
    let diff = tape.sub(h, h_ref)?;
    let mixed = tape.row_scale(diff, alpha)?;
    tape.add(h_ref, mixed)
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k.min(logits.len()));
    idx.sort_unstable();
    idx
}

/// Sparse gate weights over the current expert set.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    pub weights: Vec<f64>,
    pub active: Vec<usize>,
    /// Set when `k` exceeded the expert count and was clamped.
    pub clamped: bool,
}

/// Softmax over the top-`k` logits, zeros elsewhere.
pub fn route(logits: &[f64], k: usize) -> Result<GateVector> {
    if k == 0 {
        return Err(Error::Parameter("top-k needs k >= 1".into()));
    }
    if logits.is_empty() {
        return Err(Error::Contract("no experts to route to".into()));
    }
    let clamped = k > logits.len();
    if clamped {
        log::warn!("top-k {k} exceeds {} experts, clamping", logits.len());
    }
    let active = top_k(logits, k);
    let max = active.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut weights = vec![0.0; logits.len()];
    let mut z = 0.0;
    for &i in &active {
        weights[i] = (logits[i] - max).exp();
        z += weights[i];
    }
    weights.iter_mut().for_each(|w| *w /= z);
    Ok(GateVector {
        weights,
        active,
        clamped,
    })
}

/// One logit row of the router head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadRow {
    pub expert_id: u64,
    pub w: ParamId,
    pub b: ParamId,
    pub protected: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterHead {
    pub rows: Vec<HeadRow>,
}

impl RouterHead {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.rows.iter().flat_map(|r| [r.w, r.b])
    }

    pub fn add_base(&mut self, store: &mut ParamStore, name: &str, expert_id: u64, hidden: usize, rng: &mut impl Rng) {
        let w = store.insert_uniform(format!("{name}.w"), &[hidden, 1], hidden, rng);
        let b = store.insert_uniform(format!("{name}.b"), &[1, 1], hidden, rng);
        self.rows.push(HeadRow {
            expert_id,
            w,
            b,
            protected: true,
        });
    }

    /// Appends a zero-initialised, unprotected row.
    pub fn grow(&mut self, store: &mut ParamStore, name: &str, expert_id: u64, hidden: usize) {
        let w = store.insert(format!("{name}.w"), Tensor::zeros(&[hidden, 1]));
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[1, 1]));
        self.rows.push(HeadRow {
            expert_id,
            w,
            b,
            protected: false,
        });
    }

    pub fn shrink(&mut self, store: &mut ParamStore, expert_id: u64) -> Result<()> {
        let pos = self
            .rows
            .iter()
            .position(|r| r.expert_id == expert_id)
            .ok_or_else(|| Error::Contract(format!("no head row for expert {expert_id}")))?;
        if self.rows[pos].protected {
            return Err(Error::Contract(format!(
                "head row of base expert {expert_id} is protected"
            )));
        }
        let row = self.rows.remove(pos);
        store.remove(row.w);
        store.remove(row.b);
        Ok(())
    }

    /// Logits `[R × E]` for hidden rows `[R × d_h]`, with `W` and `b` taken
    /// from [`RouterHead::assemble`].
    fn logits(tape: &mut Tape, h: Var, w: Var, b: Var) -> Result<Var> {
        let l = tape.matmul(h, w)?;
        tape.add_row(l, b)
    }

    fn assemble(&self, tape: &mut Tape) -> Result<(Var, Var)> {
        let ws: Vec<Var> = self.rows.iter().map(|r| tape.param(r.w)).collect();
        let bs: Vec<Var> = self.rows.iter().map(|r| tape.param(r.b)).collect();
        Ok((tape.concat_cols(&ws)?, tape.concat_cols(&bs)?))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    /// Hidden state carried across patches by the GRU.
    #[default]
    Gru,
    /// `h_t = tanh(φ(x_t))`, no recurrence. Used as an ablation baseline.
    Stateless,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Router {
    pub kind: RouterKind,
    pub k: usize,
    pub hidden: usize,
    pub phi: Linear,
    pub gru: GruCell,
    pub fusion: Linear,
    pub head: RouterHead,
    pub repo: AnomalyRepository,
}

/// Per-sample routing result.
pub struct RouterOutput {
    /// `[R·N × E]`, variable-major rows, aligned with the head rows.
    pub gates: Var,
    /// Unfused hidden state after the last patch, `[R × d_h]`.
    pub last_hidden: Var,
}

impl Router {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: RouterKind,
        d_model: usize,
        hidden: usize,
        k: usize,
        repo_capacity: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            kind,
            k,
            hidden,
            phi: Linear::new(store, &format!("{name}.phi"), d_model, hidden, rng),
            gru: GruCell::new(store, &format!("{name}.gru"), hidden, rng),
            fusion: Linear::new(store, &format!("{name}.fusion"), 2 * hidden, 1, rng),
            head: RouterHead::default(),
            repo: AnomalyRepository::new(repo_capacity),
        }
    }

    /// Parameters other than the head.
    pub fn backbone_params(&self) -> Vec<ParamId> {
        let mut v = self.phi.params().to_vec();
        v.extend(self.gru.params());
        v.extend(self.fusion.params());
        v
    }

    pub fn effective_k(&self) -> usize {
        self.k.min(self.head.len())
    }

    /// Routes every patch of `x` (`[R·N × D]`, variable-major). The hidden
    /// state starts from zero for every variable of every sample.
    pub fn forward(&self, tape: &mut Tape, x: Var, n_vars: usize, n_patches: usize) -> Result<RouterOutput> {
        if self.head.is_empty() {
            return Err(Error::Contract("router head has no rows".into()));
        }
        if self.k > self.head.len() {
            log::warn!("top-k {} exceeds {} experts, clamping", self.k, self.head.len());
        }
        let k = self.effective_k();
        let u = self.phi.forward(tape, x)?;
        let (w, b) = self.head.assemble(tape)?;
        let mut h = tape.constant(Tensor::zeros(&[n_vars, self.hidden]));
        let mut per_patch = Vec::with_capacity(n_patches);
        for p in 0..n_patches {
            let rows: Vec<usize> = (0..n_vars).map(|v| v * n_patches + p).collect();
            let xp = tape.select_rows(u, &rows)?;
            h = match self.kind {
                RouterKind::Gru => self.gru.step(tape, xp, h)?,
                RouterKind::Stateless => tape.tanh(xp),
            };
            let fused = fuse_with_memory(tape, &self.fusion, &self.repo, h)?;
            let logits = RouterHead::logits(tape, fused, w, b)?;
            let lv = tape.value(logits);
            let e = lv.cols();
            let mut mask = vec![false; lv.len()];
            for r in 0..n_vars {
                for i in top_k(lv.row(r), k) {
                    mask[r * e + i] = true;
                }
            }
            per_patch.push(tape.masked_softmax_rows(logits, mask)?);
        }
        let stacked = tape.concat_rows(&per_patch)?;
        let order: Vec<usize> = (0..n_vars)
            .flat_map(|v| (0..n_patches).map(move |p| p * n_vars + v))
            .collect();
        let gates = tape.select_rows(stacked, &order)?;
        Ok(RouterOutput { gates, last_hidden: h })
    }
}

/// Writes routing weights as CSV rows `sample,variable,patch,expert_id,weight`,
/// skipping zero weights. `gates[s]` is `[V·N × E]` in variable-major order.
pub fn write_routing_trace(mut out: impl Write, gates: &[Tensor], expert_ids: &[u64], n_patches: usize) -> Result<()> {
    writeln!(out, "sample,variable,patch,expert_id,weight")?;
    for (s, g) in gates.iter().enumerate() {
        for r in 0..g.rows() {
            for (e, &w) in g.row(r).iter().enumerate() {
                if w != 0.0 {
                    writeln!(out, "{s},{},{},{},{w}", r / n_patches, r % n_patches, expert_ids[e])?;
                }
            }
        }
    }
    Ok(())
}
