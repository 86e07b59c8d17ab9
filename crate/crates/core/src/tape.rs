//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its value. Nodes only reference
//! earlier nodes, so walking the tape backwards is a valid topological order
//! and each node is visited exactly once.

use std::collections::{BTreeSet, HashMap};

use num_complex::Complex64;

use crate::error::{dim_err, Error, Result};
use crate::fft;
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Sin,
    Cos,
    Relu,
    Exp,
}

/// Operations accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Sigmoid,
    Tanh,
    Sin,
    Cos,
    Relu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    SelectRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowScale(Var, Var),
    MaskedSoftmax(Var, Vec<bool>),
    RowNormalize(Var),
    MovingAverage {
        x: Var,
        window: usize,
        seq_len: usize,
    },
    CausalConv {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        seq_len: usize,
    },
    Rfft {
        x: Var,
        seq_len: usize,
    },
    Irfft {
        x: Var,
        seq_len: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single forward computation. Parameters are read from the borrowed
/// [`ParamStore`]; the tape never mutates it.
pub struct Tape<'s> {
    store: Option<&'s ParamStore>,
    params_trainable: bool,
    subset: Option<&'s BTreeSet<ParamId>>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'s> Tape<'s> {
    /// Tape without parameters, for standalone operator use.
    pub fn new() -> Tape<'static> {
        Tape {
            store: None,
            params_trainable: false,
            subset: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    /// Tape whose parameter leaves receive gradients.
    pub fn training(store: &'s ParamStore) -> Self {
        Tape {
            store: Some(store),
            params_trainable: true,
            subset: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    /// Tape where only the parameters in `trainable` receive gradients.
    pub fn training_subset(store: &'s ParamStore, trainable: &'s BTreeSet<ParamId>) -> Self {
        Tape {
            store: Some(store),
            params_trainable: true,
            subset: Some(trainable),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    /// Tape whose parameters enter as constants.
    pub fn inference(store: &'s ParamStore) -> Self {
        Tape {
            store: Some(store),
            params_trainable: false,
            subset: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input tensor; `requires_grad` makes its gradient available after backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Parameter leaf. Repeated requests return the same node, so a parameter
    /// used several times accumulates into one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let value = store.value(id).clone();
        let trainable = self.params_trainable && self.subset.is_none_or(|s| s.contains(&id));
        let v = self.push(value, Op::Param, trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)
        } else if tb.len() == 1 {
            let y = tb.data()[0];
            Ok(ta.map(|x| f(x, y)))
        } else if ta.len() == 1 {
            let x = ta.data()[0];
            Ok(tb.map(|y| f(x, y)))
        } else {
            dim_err(format!(
                "{name}: shapes {:?} and {:?} are not broadcast-compatible",
                ta.shape(),
                tb.shape()
            ))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `x[r×c] + bias[1×c]` on every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.len() != c {
            return dim_err(format!(
                "add_row: bias {:?} does not match columns of {:?}",
                tb.shape(),
                tx.shape()
            ));
        }
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % c];
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddRow(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, factor), ng)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Sin => f64::sin,
            Unary::Cos => f64::cos,
            Unary::Relu => |v| v.max(0.0),
            Unary::Exp => f64::exp,
        };
        let out = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(out, Op::Unary(x, kind), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sin)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Cos)
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            ElementwiseOp::Add | ElementwiseOp::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Contract(format!(
                "{op:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        Ok(match op {
            ElementwiseOp::Add => self.add(inputs[0], inputs[1])?,
            ElementwiseOp::Mul => self.mul(inputs[0], inputs[1])?,
            ElementwiseOp::Sigmoid => self.sigmoid(inputs[0]),
            ElementwiseOp::Tanh => self.tanh(inputs[0]),
            ElementwiseOp::Sin => self.sin(inputs[0]),
            ElementwiseOp::Cos => self.cos(inputs[0]),
            ElementwiseOp::Relu => self.relu(inputs[0]),
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean squared difference, as a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(out, Op::Transpose(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Gathers rows by index (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return dim_err(format!("select_rows: row {i} out of range for {:?}", t.shape()));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(&[idx.len(), c], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SelectRows(x, idx.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if start >= end || end > c {
            return dim_err(format!("slice_cols {start}..{end} invalid for {:?}", t.shape()));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let out = Tensor::new(&[r, end - start], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols(x, start, end), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return dim_err("concat_cols: row counts differ");
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[r, total], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != c) {
            return dim_err("concat_rows: column counts differ");
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let r = data.len() / c;
        let out = Tensor::new(&[r, c], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// `out[r, c] = x[r, c] * w[r]` with `w` of shape `[rows × 1]`.
    pub fn row_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (r, c) = (tx.rows(), tx.cols());
        if tw.len() != r {
            return dim_err(format!(
                "row_scale: weights {:?} do not match rows of {:?}",
                tw.shape(),
                tx.shape()
            ));
        }
        let mut out = tx.clone();
        for i in 0..r {
            let s = tw.data()[i];
            out.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(out, Op::RowScale(x, w), ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mask = vec![true; self.value(x).len()];
        self.masked_softmax_rows(x, mask)
            .expect("mask length matches by construction")
    }

    /// Row-wise softmax over the entries where `mask` is set; the rest are 0.
    /// Every row must keep at least one entry.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return dim_err("masked_softmax_rows: mask length differs from input");
        }
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row(i);
            let m = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("softmax row {i} keeps no entries")));
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                if m[j] {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let out = Tensor::new(t.shape(), out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::MaskedSoftmax(x, mask), ng))
    }

    /// Scales each row to unit Euclidean norm; zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::RowNormalize(x), ng)
    }

    /// Same-length moving average along rows, applied independently to each
    /// block of `seq_len` rows, with edge replication. The window covers
    /// `window / 2` rows before and `window - 1 - window / 2` rows after.
    pub fn moving_average(&mut self, x: Var, window: usize, seq_len: usize) -> Result<Var> {
        let t = self.value(x);
        check_blocks(t, seq_len, "moving_average")?;
        if window == 0 || window > seq_len {
            return Err(Error::Parameter(format!(
                "moving_average window {window} must be in 1..={seq_len}"
            )));
        }
        let c = t.cols();
        let mut out = vec![0.0; t.len()];
        for (b, blk) in t.data().chunks(seq_len * c).enumerate() {
            for tt in 0..seq_len {
                let o = &mut out[(b * seq_len + tt) * c..(b * seq_len + tt + 1) * c];
                for src in window_rows(tt, window, seq_len) {
                    for (ov, &xv) in o.iter_mut().zip(&blk[src * c..(src + 1) * c]) {
                        *ov += xv;
                    }
                }
                o.iter_mut().for_each(|v| *v /= window as f64);
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::MovingAverage { x, window, seq_len }, ng))
    }

    /// Causal 1-D convolution along rows within blocks of `seq_len` rows.
    ///
    /// `w` has shape `[K·D_in × D_out]` where row `k·D_in + i` holds the
    /// weights applied to input channel `i` at lag `k` (lag 0 is the current
    /// position). `b` is `[1 × D_out]`. Positions before the block start are
    /// zero.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var, seq_len: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        check_blocks(tx, seq_len, "causal_conv1d")?;
        let din = tx.cols();
        let dout = tw.cols();
        if tw.rows() % din != 0 || tw.rows() == 0 {
            return dim_err(format!(
                "causal_conv1d: kernel {:?} incompatible with input {:?}",
                tw.shape(),
                tx.shape()
            ));
        }
        if tb.len() != dout {
            return dim_err("causal_conv1d: bias length differs from output channels");
        }
        let k = tw.rows() / din;
        let rows = tx.rows();
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            let pos = r % seq_len;
            let o = &mut out[r * dout..(r + 1) * dout];
            o.copy_from_slice(tb.data());
            for lag in 0..k.min(pos + 1) {
                let xin = tx.row(r - lag);
                let wblk = &tw.data()[lag * din * dout..(lag + 1) * din * dout];
                matmul_into(xin, wblk, o, 1, din, dout);
            }
        }
        let out = Tensor::new(&[rows, dout], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(out, Op::CausalConv { x, w, b, k, seq_len }, ng))
    }

    /// Real DFT along rows within each block of `seq_len` rows.
    ///
    /// Input `[B·N × C]` becomes `[B·F × 2C]` with `F = N/2 + 1`: the first
    /// `C` columns hold real parts and the last `C` imaginary parts.
    pub fn rfft_rows(&mut self, x: Var, seq_len: usize) -> Result<Var> {
        let t = self.value(x);
        check_blocks(t, seq_len, "rfft_rows")?;
        let c = t.cols();
        let blocks = t.rows() / seq_len;
        let f = fft::rfft_bins(seq_len);
        let mut out = vec![0.0; blocks * f * 2 * c];
        let mut col = vec![0.0; seq_len];
        for b in 0..blocks {
            for ch in 0..c {
                for (tt, v) in col.iter_mut().enumerate() {
                    *v = t.get(b * seq_len + tt, ch);
                }
                for (k, z) in fft::rfft(&col).iter().enumerate() {
                    out[(b * f + k) * 2 * c + ch] = z.re;
                    out[(b * f + k) * 2 * c + c + ch] = z.im;
                }
            }
        }
        let out = Tensor::new(&[blocks * f, 2 * c], out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Rfft { x, seq_len }, ng))
    }

    /// Inverse of [`Tape::rfft_rows`]: `[B·F × 2C]` back to `[B·N × C]`.
    pub fn irfft_rows(&mut self, x: Var, seq_len: usize) -> Result<Var> {
        let t = self.value(x);
        let f = fft::rfft_bins(seq_len);
        if !t.rows().is_multiple_of(f) || !t.cols().is_multiple_of(2) {
            return dim_err(format!(
                "irfft_rows: {:?} is not a stacked spectrum with {f} bins per block",
                t.shape()
            ));
        }
        let c = t.cols() / 2;
        let blocks = t.rows() / f;
        let mut out = vec![0.0; blocks * seq_len * c];
        let mut spec = vec![Complex64::new(0.0, 0.0); f];
        for b in 0..blocks {
            for ch in 0..c {
                for (k, z) in spec.iter_mut().enumerate() {
                    *z = Complex64::new(t.get(b * f + k, ch), t.get(b * f + k, c + ch));
                }
                for (tt, v) in fft::irfft_unchecked(&spec, seq_len).into_iter().enumerate() {
                    out[(b * seq_len + tt) * c + ch] = v;
                }
            }
        }
        let out = Tensor::new(&[blocks * seq_len, c], out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Irfft { x, seq_len }, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = ParamGrads::new();
        for (&id, &v) in &self.param_vars {
            if self.nodes[v.0].needs_grad {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
                params.insert(id, g);
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                self.acc(grads, *a, |ga| {
                    for r in 0..m {
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            ga[r * k + p] += g[r * n..(r + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for r in 0..m {
                        for p in 0..k {
                            let av = ta.data()[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *o += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc_broadcast(grads, *a, g, |gv, _| gv);
                self.acc_broadcast(grads, *b, g, |gv, _| gv);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(grads, *a, g, |gv, _| gv);
                self.acc_broadcast(grads, *b, g, |gv, _| -gv);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let other = |t: &Tensor, j: usize| {
                    if t.len() == 1 {
                        t.data()[0]
                    } else {
                        t.data()[j]
                    }
                };
                self.acc_broadcast(grads, *a, g, |gv, j| gv * other(tb, j));
                self.acc_broadcast(grads, *b, g, |gv, j| gv * other(ta, j));
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, |gx| add_slice(gx, g));
                let c = self.value(*b).len();
                self.acc(grads, *b, |gb| {
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % c] += gv;
                    }
                });
            }
            Op::Scale(x, s) => self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b)),
            Op::Unary(x, kind) => {
                let tx = self.value(*x);
                self.acc(grads, *x, |gx| {
                    for j in 0..gx.len() {
                        let (xv, yv) = (tx.data()[j], out.data()[j]);
                        let d = match kind {
                            Unary::Sigmoid => yv * (1.0 - yv),
                            Unary::Tanh => 1.0 - yv * yv,
                            Unary::Sin => xv.cos(),
                            Unary::Cos => -xv.sin(),
                            Unary::Relu => {
                                if xv > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Exp => yv,
                        };
                        gx[j] += g[j] * d;
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0] / n))
            }
            Op::Transpose(x) => {
                let (r, c) = (out.rows(), out.cols());
                self.acc(grads, *x, |gx| {
                    for a in 0..r {
                        for b in 0..c {
                            gx[b * r + a] += g[a * c + b];
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |gx| add_slice(gx, g)),
            Op::SelectRows(x, idx) => {
                let c = out.cols();
                self.acc(grads, *x, |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_slice(&mut gx[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::SliceCols(x, start, end) => {
                let c = self.value(*x).cols();
                let w = end - start;
                self.acc(grads, *x, |gx| {
                    for r in 0..out.rows() {
                        add_slice(&mut gx[r * c + start..r * c + end], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut off = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    self.acc(grads, *p, |gp| {
                        for r in 0..out.rows() {
                            add_slice(&mut gp[r * pc..(r + 1) * pc], &g[r * total + off..r * total + off + pc]);
                        }
                    });
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.acc(grads, *p, |gp| add_slice(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::RowScale(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let c = tx.cols();
                self.acc(grads, *x, |gx| {
                    for (j, v) in gx.iter_mut().enumerate() {
                        *v += g[j] * tw.data()[j / c];
                    }
                });
                self.acc(grads, *w, |gw| {
                    for (r, v) in gw.iter_mut().enumerate() {
                        *v += dot(&g[r * c..(r + 1) * c], tx.row(r));
                    }
                });
            }
            Op::MaskedSoftmax(x, mask) => {
                let c = out.cols();
                self.acc(grads, *x, |gx| {
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let d = dot(y, gr);
                        for j in 0..c {
                            if mask[r * c + j] {
                                gx[r * c + j] += y[j] * (gr[j] - d);
                            }
                        }
                    }
                });
            }
            Op::RowNormalize(x) => {
                let tx = self.value(*x);
                let c = tx.cols();
                self.acc(grads, *x, |gx| {
                    for r in 0..tx.rows() {
                        let n = tx.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n == 0.0 {
                            continue;
                        }
                        let y = out.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let d = dot(y, gr);
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - y[j] * d) / n;
                        }
                    }
                });
            }
            Op::MovingAverage { x, window, seq_len } => {
                let c = out.cols();
                let blocks = out.rows() / seq_len;
                self.acc(grads, *x, |gx| {
                    for b in 0..blocks {
                        for tt in 0..*seq_len {
                            let gr = &g[(b * seq_len + tt) * c..(b * seq_len + tt + 1) * c];
                            for src in window_rows(tt, *window, *seq_len) {
                                let dst = &mut gx[(b * seq_len + src) * c..(b * seq_len + src + 1) * c];
                                for (d, gv) in dst.iter_mut().zip(gr) {
                                    *d += gv / *window as f64;
                                }
                            }
                        }
                    }
                });
            }
            Op::CausalConv { x, w, b, k, seq_len } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let din = tx.cols();
                let dout = out.cols();
                let rows = out.rows();
                self.acc(grads, *x, |gx| {
                    for r in 0..rows {
                        let pos = r % seq_len;
                        let gr = &g[r * dout..(r + 1) * dout];
                        for lag in 0..(*k).min(pos + 1) {
                            let wblk = &tw.data()[lag * din * dout..(lag + 1) * din * dout];
                            let dst = &mut gx[(r - lag) * din..(r - lag + 1) * din];
                            for (i, d) in dst.iter_mut().enumerate() {
                                *d += dot(gr, &wblk[i * dout..(i + 1) * dout]);
                            }
                        }
                    }
                });
                self.acc(grads, *w, |gw| {
                    for r in 0..rows {
                        let pos = r % seq_len;
                        let gr = &g[r * dout..(r + 1) * dout];
                        for lag in 0..(*k).min(pos + 1) {
                            let xin = tx.row(r - lag);
                            for (i, &xv) in xin.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let dst = &mut gw[(lag * din + i) * dout..(lag * din + i + 1) * dout];
                                for (d, gv) in dst.iter_mut().zip(gr) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for r in 0..rows {
                        add_slice(gb, &g[r * dout..(r + 1) * dout]);
                    }
                });
            }
            Op::Rfft { x, seq_len } => {
                let c = self.value(*x).cols();
                let f = fft::rfft_bins(*seq_len);
                let blocks = out.rows() / f;
                self.acc(grads, *x, |gx| {
                    let mut spec = vec![Complex64::new(0.0, 0.0); f];
                    for b in 0..blocks {
                        for ch in 0..c {
                            for (k, z) in spec.iter_mut().enumerate() {
                                let row = (b * f + k) * 2 * c;
                                *z = Complex64::new(g[row + ch], g[row + c + ch]);
                            }
                            for (tt, v) in fft::rfft_adjoint(&spec, *seq_len).into_iter().enumerate() {
                                gx[(b * seq_len + tt) * c + ch] += v;
                            }
                        }
                    }
                });
            }
            Op::Irfft { x, seq_len } => {
                let c = out.cols();
                let f = fft::rfft_bins(*seq_len);
                let blocks = out.rows() / seq_len;
                let n = *seq_len as f64;
                self.acc(grads, *x, |gx| {
                    let mut col = vec![0.0; *seq_len];
                    for b in 0..blocks {
                        for ch in 0..c {
                            for (tt, v) in col.iter_mut().enumerate() {
                                *v = g[(b * seq_len + tt) * c + ch];
                            }
                            for (k, z) in fft::rfft(&col).into_iter().enumerate() {
                                let wk = fft::fold_weight(k, *seq_len) / n;
                                let row = (b * f + k) * 2 * c;
                                gx[row + ch] += wk * z.re;
                                if !(k == 0 || 2 * k == *seq_len) {
                                    gx[row + c + ch] += wk * z.im;
                                }
                            }
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    /// Accumulates `f(g_j, j)` into `v`, summing when `v` was broadcast.
    fn acc_broadcast(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], f: impl Fn(f64, usize) -> f64) {
        let n = self.nodes[v.0].value.len();
        self.acc(grads, v, |gv| {
            if n == g.len() {
                for j in 0..n {
                    gv[j] += f(g[j], j);
                }
            } else {
                gv[0] += (0..g.len()).map(|j| f(g[j], j)).sum::<f64>();
            }
        });
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient of a node; zeros if the node was unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_blocks(t: &Tensor, seq_len: usize, name: &str) -> Result<()> {
    if seq_len == 0 || !t.rows().is_multiple_of(seq_len) {
        return dim_err(format!(
            "{name}: {} rows are not a multiple of sequence length {seq_len}",
            t.rows()
        ));
    }
    Ok(())
}

fn window_rows(t: usize, window: usize, n: usize) -> impl Iterator<Item = usize> {
    let left = window / 2;
    (0..window).map(move |j| (t + j).saturating_sub(left).min(n - 1))
}

fn add_slice(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of `build` w.r.t. every input.
    #[allow(clippy::needless_range_loop)]
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let eval = |xs: &[Tensor]| {
            let mut tp = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| tp.leaf(x.clone(), false)).collect();
            let o = build(&mut tp, &vs);
            tp.value(o).data()[0]
        };
        let h = 1e-5;
        for (i, x) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[i]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; x.len()]);
            for j in 0..x.len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (numeric - analytic[j]).abs() / numeric.abs().max(analytic[j].abs()).max(1e-3);
                assert!(
                    err < 1e-4,
                    "input {i} elem {j}: numeric {numeric} analytic {}",
                    analytic[j]
                );
            }
        }
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let half_pi = tape.constant(Tensor::scalar(std::f64::consts::FRAC_PI_2));
        let s = tape.sigmoid(z);
        let th = tape.tanh(z);
        let sn = tape.sin(half_pi);
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert_eq!(tape.value(th).data()[0], 0.0);
        assert!((tape.value(sn).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn elementwise_rejects_bad_shapes_and_arity() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
        assert!(tape.elementwise(ElementwiseOp::Add, &[a]).is_err());
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let x = t(&[vec![1.0, -2.0, 0.5]]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(v).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn disconnected_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0), true);
        let b = tape.leaf(Tensor::scalar(3.0), true);
        let loss = tape.mul(a, a).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(b).is_none());
        assert_eq!(g.wrt(a).unwrap(), &[4.0]);
    }

    #[test]
    fn reuse_accumulates_exactly() {
        // f(x) = sum(x*w1) + sum(x*w2) must give the sum of the single-use gradients.
        let x = t(&[vec![0.3, -1.2]]);
        let w1 = t(&[vec![2.0, 5.0]]);
        let w2 = t(&[vec![-1.0, 0.25]]);
        let grad_of = |ws: &[&Tensor]| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let mut terms = Vec::new();
            for w in ws {
                let wv = tape.constant((*w).clone());
                let p = tape.mul(xv, wv).unwrap();
                terms.push(tape.sum(p));
            }
            let mut loss = terms[0];
            for &tm in &terms[1..] {
                loss = tape.add(loss, tm).unwrap();
            }
            tape.backward(loss).unwrap().wrt(xv).unwrap().to_vec()
        };
        let both = grad_of(&[&w1, &w2]);
        let a = grad_of(&[&w1]);
        let b = grad_of(&[&w2]);
        for j in 0..2 {
            assert_eq!(both[j], a[j] + b[j]);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn moving_average_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.moving_average(x, 3, 4).unwrap();
        let want = [4.0 / 3.0, 2.0, 3.0, 11.0 / 3.0];
        for (a, b) in tape.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let id = tape.moving_average(x, 1, 4).unwrap();
        assert_eq!(tape.value(id), tape.value(x));
        let c = tape.constant(Tensor::full(&[5, 2], 1.7));
        for w in 1..=5 {
            let y = tape.moving_average(c, w, 5).unwrap();
            assert!(tape.value(y).data().iter().all(|v| (v - 1.7).abs() < 1e-12));
        }
        assert!(matches!(tape.moving_average(x, 5, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn causal_conv_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 1], vec![1.0, 0.0, 0.0]).unwrap());
        let w = tape.constant(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1, 1]));
        let y = tape.causal_conv1d(x, w, b, 3).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 0.0]);

        // impulse at tau=3: nothing before it
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut imp = Tensor::zeros(&[6, 2]);
        imp.data_mut()[3 * 2] = 1.0;
        let x = tape.constant(imp);
        let w = tape.constant(random(&[3 * 2, 2], &mut rng));
        let b = tape.constant(Tensor::zeros(&[1, 2]));
        let y = tape.causal_conv1d(x, w, b, 6).unwrap();
        assert!(tape.value(y).data()[..3 * 2].iter().all(|&v| v == 0.0));

        // K=1 is a per-position linear map
        let xin = random(&[4, 3], &mut rng);
        let wk = random(&[3, 2], &mut rng);
        let x = tape.constant(xin.clone());
        let w = tape.constant(wk.clone());
        let b = tape.constant(Tensor::zeros(&[1, 2]));
        let y = tape.causal_conv1d(x, w, b, 4).unwrap();
        assert!(tape.value(y).max_abs_diff(&xin.matmul(&wk).unwrap()) < 1e-14);
    }

    #[test]
    fn rfft_rows_dc_and_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[8, 1], 3.0));
        let s = tape.rfft_rows(x, 8).unwrap();
        let v = tape.value(s);
        assert!((v.get(0, 0) - 24.0).abs() < 1e-12);
        for k in 1..5 {
            assert!(v.get(k, 0).abs() < 1e-12 && v.get(k, 1).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [7, 8, 64] {
            let xin = random(&[2 * n, 3], &mut rng);
            let x = tape.constant(xin.clone());
            let s = tape.rfft_rows(x, n).unwrap();
            let back = tape.irfft_rows(s, n).unwrap();
            assert!(tape.value(back).max_abs_diff(&xin) < 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut r = |s: &[usize]| random(s, &mut rng);
            check(vec![r(&[3, 4]), r(&[4, 2])], |tp, v| {
                let m = tp.matmul(v[0], v[1]).unwrap();
                let q = tp.mul(m, m).unwrap();
                tp.sum(q)
            });
            check(vec![r(&[2, 3]), r(&[2, 3]), r(&[1, 1])], |tp, v| {
                let a = tp.add(v[0], v[1]).unwrap();
                let s = tp.sub(a, v[2]).unwrap();
                let m = tp.mul(s, v[0]).unwrap();
                let m = tp.mul(m, v[2]).unwrap();
                tp.sum(m)
            });
            for kind in [Unary::Sigmoid, Unary::Tanh, Unary::Sin, Unary::Cos, Unary::Exp] {
                check(vec![r(&[2, 3]), r(&[2, 3])], move |tp, v| {
                    let u = tp.unary(v[0], kind);
                    let m = tp.mul(u, v[1]).unwrap();
                    tp.sum(m)
                });
            }
            check(vec![r(&[3, 4]), r(&[1, 4]), r(&[3, 4])], |tp, v| {
                let a = tp.add_row(v[0], v[1]).unwrap();
                let s = tp.softmax_rows(a);
                let m = tp.mul(s, v[2]).unwrap();
                tp.sum(m)
            });
            check(vec![r(&[3, 4]), r(&[3, 4])], |tp, v| {
                let mask = vec![
                    true, false, true, true, false, true, false, false, true, true, true, true,
                ];
                let s = tp.masked_softmax_rows(v[0], mask).unwrap();
                let m = tp.mul(s, v[1]).unwrap();
                tp.sum(m)
            });
            check(vec![r(&[3, 5]), r(&[3, 5])], |tp, v| {
                let n = tp.row_normalize(v[0]);
                let m = tp.mul(n, v[1]).unwrap();
                tp.sum(m)
            });
            check(vec![r(&[4, 3]), r(&[4, 1]), r(&[3, 4])], |tp, v| {
                let s = tp.row_scale(v[0], v[1]).unwrap();
                let t = tp.transpose(s);
                let m = tp.mul(t, v[2]).unwrap();
                let q = tp.mul(m, m).unwrap();
                tp.mean(q)
            });
            check(vec![r(&[6, 2]), r(&[6, 2])], |tp, v| {
                let a = tp.moving_average(v[0], 3, 3).unwrap();
                let b = tp.moving_average(v[0], 2, 6).unwrap();
                let s = tp.add(a, b).unwrap();
                let m = tp.mul(s, v[1]).unwrap();
                tp.sum(m)
            });
            check(vec![r(&[8, 3]), r(&[3 * 3, 2]), r(&[1, 2]), r(&[8, 2])], |tp, v| {
                let c = tp.causal_conv1d(v[0], v[1], v[2], 4).unwrap();
                let m = tp.mul(c, v[3]).unwrap();
                tp.sum(m)
            });
            for n in [4, 5, 8] {
                let f = n / 2 + 1;
                check(vec![r(&[2 * n, 2]), r(&[2 * f, 4])], move |tp, v| {
                    let s = tp.rfft_rows(v[0], n).unwrap();
                    let m = tp.mul(s, v[1]).unwrap();
                    tp.sum(m)
                });
                check(vec![r(&[2 * f, 4]), r(&[2 * n, 2])], move |tp, v| {
                    let x = tp.irfft_rows(v[0], n).unwrap();
                    let m = tp.mul(x, v[1]).unwrap();
                    tp.sum(m)
                });
            }
            check(vec![r(&[2, 3]), r(&[2, 2]), r(&[3, 5])], |tp, v| {
                let cat = tp.concat_cols(&[v[0], v[1]]).unwrap();
                let sl = tp.slice_cols(cat, 1, 4).unwrap();
                let rows = tp.concat_rows(&[sl, v[0]]).unwrap();
                let sel = tp.select_rows(rows, &[3, 0, 0, 2]).unwrap();
                let re = tp.reshape(sel, &[3, 4]).unwrap();
                let t = tp.transpose(re);
                let m = tp.matmul(t, v[2]).unwrap();
                let q = tp.mul(m, m).unwrap();
                tp.sum(q)
            });
        }
    }

    #[test]
    fn identical_inputs_give_bit_identical_outputs() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut tape = Tape::new();
            let a = tape.leaf(random(&[4, 8], &mut rng), true);
            let s = tape.rfft_rows(a, 4).unwrap();
            let t = tape.tanh(s);
            let l = tape.sum(t);
            let g = tape.backward(l).unwrap();
            (tape.value(l).clone(), g.wrt(a).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }
}
