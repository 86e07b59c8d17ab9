#![allow(dead_code)]

use driftmoe::data::{generate_stream, RegimeScript, SeriesDataset};
use driftmoe::model::{Model, ModelConfig};
use driftmoe::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Largest component-wise relative error between analytic and central
/// finite-difference gradients. Denominators are floored at `1e-4`, so tiny
/// gradients are compared absolutely.
#[derive(Debug)]
pub struct FdResult {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-4;

/// Checks `build` (returning a scalar) against finite differences for every
/// element of every parameter in `params` and every tensor in `inputs`.
#[allow(clippy::needless_range_loop)]
pub fn fd_check(
    store: &ParamStore,
    params: &[ParamId],
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) -> FdResult {
    let mut tape = Tape::training(store);
    let leaves: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = build(&mut tape, &leaves);
    let grads = tape.backward(out).unwrap();

    let eval = |s: &ParamStore, xs: &[Tensor]| {
        let mut tp = Tape::inference(s);
        let vs: Vec<Var> = xs.iter().map(|x| tp.constant(x.clone())).collect();
        let o = build(&mut tp, &vs);
        tp.value(o).data()[0]
    };
    let mut res = FdResult {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut note = |what: String, numeric: f64, analytic: f64| {
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(FD_FLOOR);
        res.checked += 1;
        if rel > res.max_rel {
            res.max_rel = rel;
            res.worst = format!("{what}: numeric {numeric:e} analytic {analytic:e}");
        }
    };
    for &id in params {
        let n = store.value(id).len();
        let analytic = grads.params().get(id).map(<[f64]>::to_vec).unwrap_or(vec![0.0; n]);
        for j in 0..n {
            let mut plus = store.clone();
            plus.value_mut(id).data_mut()[j] += FD_STEP;
            let mut minus = store.clone();
            minus.value_mut(id).data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus, inputs) - eval(&minus, inputs)) / (2.0 * FD_STEP);
            let name = &store.get(id).unwrap().name;
            note(format!("{name}[{j}]"), numeric, analytic[j]);
        }
    }
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(leaves[i]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; x.len()]);
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(store, &plus) - eval(store, &minus)) / (2.0 * FD_STEP);
            note(format!("input{i}[{j}]"), numeric, analytic[j]);
        }
    }
    res
}

/// `Σ out ⊙ weights`: a scalar whose gradient reaches every output element
/// with a different weight.
pub fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Var {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

/// Two variables, three patches of width 8 (L = 16, S = 4), D = 4, one MoE
/// layer with one expert of each kind.
pub fn micro_config(seed: u64) -> ModelConfig {
    ModelConfig {
        lookback: 16,
        horizon: 8,
        n_vars: 2,
        patch_len: 8,
        stride: 4,
        d_model: 4,
        d_hidden: 4,
        moe_layers: 1,
        cycle_len: 4,
        seed,
        ..Default::default()
    }
}

pub fn micro_model(seed: u64) -> Model {
    Model::new(micro_config(seed)).unwrap()
}

pub fn stream(toml: &str) -> SeriesDataset {
    generate_stream(&RegimeScript::from_toml(toml).unwrap()).unwrap()
}

/// Two-regime stream: `mean 0 → shift_to` at `shift`, unit noise.
pub fn mean_shift_stream(seed: u64, vars: usize, len: usize, shift: usize, shift_to: f64) -> SeriesDataset {
    stream(&format!(
        "seed = {seed}\nvariables = {vars}\n\
         [[segments]]\nkind = \"level\"\nlength = {shift}\n\
         [[segments]]\nkind = \"level\"\nlength = {}\nparams = {{ mean = {shift_to} }}\n",
        len - shift
    ))
}

pub fn stationary_stream(seed: u64, vars: usize, len: usize) -> SeriesDataset {
    stream(&format!(
        "seed = {seed}\nvariables = {vars}\n[[segments]]\nkind = \"level\"\nlength = {len}\n"
    ))
}

/// The three-regime stream used for the ablation: seasonal, trending and
/// volatile segments of 1000 steps, repeated twice, three variables.
pub fn three_regime_stream(seed: u64) -> SeriesDataset {
    let seg =
        |kind: &str, params: &str| format!("[[segments]]\nkind = \"{kind}\"\nlength = 1000\nparams = {{ {params} }}\n");
    let cycle = seg(
        "sinusoid",
        "mean = 2.0, amplitude = 3.0, period = 24.0, noise_std = 0.3",
    ) + &seg("trend", "slope = 0.01, noise_std = 0.3")
        + &seg("ar1", "mean = -1.0, phi = -0.8, noise_std = 1.0");
    stream(&format!("seed = {seed}\nvariables = 3\n{}", cycle.repeat(2)))
}
