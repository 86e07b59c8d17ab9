//! The stacked mixture-of-experts forecaster, its optimiser, training loop,
//! evaluation and checkpoints.

mod checkpoint;
mod config;
mod metrics;
mod optim;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::patch_matrix;
use crate::error::{Error, Result};
use crate::experts::{active_columns, mix, CyclicRelation, Expert, ExpertInfo, ExpertShape};
use crate::manager::{EventRecord, ExpertPool, UsageTracker};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::router::Router;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use config::{ModelConfig, TrainConfig};
pub use metrics::{evaluate, mse_mae, predict_split, MetricsReport};
pub use optim::AdamW;
pub use train::{batch_gradients, train, BatchResult, EpochLoss, TrainReport};

/// Router, expert pool and relation layer of one stacked block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    pub router: Router,
    pub pool: ExpertPool,
    pub relation: CyclicRelation,
    pub usage: UsageTracker,
}

/// Everything of a model except parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStructure {
    pub config: ModelConfig,
    pub embed: Linear,
    pub layers: Vec<MoeLayer>,
    pub output: Linear,
    pub events: Vec<EventRecord>,
    pub next_event: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub structure: ModelStructure,
    pub store: ParamStore,
}

/// Tape handles produced by one forward pass.
pub struct Forward {
    /// `T × V`
    pub pred: Var,
    /// Per layer, `[V·N × E]` gate weights (variable-major rows).
    pub gates: Vec<Var>,
    /// Per layer, the router state after the last patch, `[V × d_h]`.
    pub last_hidden: Vec<Var>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let n = config.n_patches()?;
        let shape = config.expert_shape();
        let embed = Linear::new(&mut store, "embed", config.patch_len, d, &mut rng);
        let mut layers = Vec::with_capacity(config.moe_layers);
        for l in 0..config.moe_layers {
            let mut router = Router::new(
                &mut store,
                &format!("layer{l}.router"),
                config.router,
                d,
                config.d_hidden,
                config.top_k,
                config.repo_capacity,
                &mut rng,
            );
            let mut base = Vec::with_capacity(config.base_roster.len());
            for (i, &kind) in config.base_roster.iter().enumerate() {
                let e = Expert::new(&mut store, kind, i as u64, &shape, &mut rng)?;
                router.head.add_base(
                    &mut store,
                    &format!("layer{l}.head{i}"),
                    e.id,
                    config.d_hidden,
                    &mut rng,
                );
                base.push(e);
            }
            let relation = CyclicRelation::new(
                &mut store,
                &format!("layer{l}.relation"),
                config.n_vars,
                config.cycle_len,
                &mut rng,
            )?;
            layers.push(MoeLayer {
                router,
                pool: ExpertPool::new(base, config.manager.pool_cap),
                relation,
                usage: UsageTracker::new(config.manager.tau, config.manager.patience, config.manager.window_steps),
            });
        }
        let output = Linear::new(&mut store, "output", n * d, config.horizon, &mut rng);
        Ok(Self {
            structure: ModelStructure {
                config,
                embed,
                layers,
                output,
                events: Vec::new(),
                next_event: 0,
            },
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.structure.config
    }

    pub fn layers(&self) -> &[MoeLayer] {
        &self.structure.layers
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.structure.events
    }

    /// SHA-256 over every parameter id, shape and value.
    pub fn digest(&self) -> String {
        self.store.digest()
    }

    /// Parameters outside every router head and expert.
    pub fn shared_params(&self) -> Vec<ParamId> {
        let s = &self.structure;
        let mut v = s.embed.params().to_vec();
        v.extend(s.output.params());
        for l in &s.layers {
            v.extend(l.router.backbone_params());
            v.extend(l.relation.param_ids());
        }
        v
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        self.structure
            .layers
            .iter()
            .flat_map(|l| l.router.head.params())
            .collect()
    }

    /// `(layer, info)` for every expert in head order.
    pub fn inventory(&self) -> Vec<(usize, ExpertInfo)> {
        self.structure
            .layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| {
                layer
                    .pool
                    .experts
                    .iter()
                    .map(move |e| (l, ExpertInfo::of(e, &self.store)))
            })
            .collect()
    }

    pub fn drift_expert_count(&self) -> usize {
        self.structure.layers.iter().map(|l| l.pool.drift_count()).sum()
    }

    /// Forward pass for one look-back window `input` (`L × V`) whose last
    /// step is at absolute index `origin`.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor, origin: usize) -> Result<Forward> {
        let cfg = &self.structure.config;
        let (v, d) = (cfg.n_vars, cfg.d_model);
        if input.shape() != [cfg.lookback, v] {
            return Err(Error::Dimension(format!(
                "model expects a {}x{v} window, got {:?}",
                cfg.lookback,
                input.shape()
            )));
        }
        let n = cfg.n_patches()?;
        let patches = tape.constant(patch_matrix(input, cfg.patch_len, cfg.stride)?);
        let mut x = self.structure.embed.forward(tape, patches)?;
        let mut gates = Vec::with_capacity(self.structure.layers.len());
        let mut last_hidden = Vec::with_capacity(self.structure.layers.len());
        for layer in &self.structure.layers {
            let routed = layer.router.forward(tape, x, v, n)?;
            let used = active_columns(tape.value(routed.gates));
            let mut outputs = Vec::with_capacity(used.len());
            for (expert, &on) in layer.pool.experts.iter().zip(&used) {
                outputs.push(if on { Some(expert.forward(tape, x, n)?) } else { None });
            }
            let mixed = mix(tape, &outputs, routed.gates)?;
            x = layer.relation.forward(tape, mixed, origin)?;
            gates.push(routed.gates);
            last_hidden.push(routed.last_hidden);
        }
        let flat = tape.reshape(x, &[v, n * d])?;
        let y = self.structure.output.forward(tape, flat)?;
        let pred = tape.transpose(y);
        Ok(Forward {
            pred,
            gates,
            last_hidden,
        })
    }

    /// Inference-only prediction, `T × V`.
    pub fn predict(&self, input: &Tensor, origin: usize) -> Result<Tensor> {
        let mut tape = Tape::inference(&self.store);
        let f = self.forward(&mut tape, input, origin)?;
        Ok(tape.value(f.pred).clone())
    }

    /// Inference forward that also returns each layer's gate matrix.
    pub fn predict_with_gates(&self, input: &Tensor, origin: usize) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::inference(&self.store);
        let f = self.forward(&mut tape, input, origin)?;
        let gates = f.gates.iter().map(|&g| tape.value(g).clone()).collect();
        Ok((tape.value(f.pred).clone(), gates))
    }
}

impl ModelConfig {
    pub fn expert_shape(&self) -> ExpertShape {
        ExpertShape {
            d_model: self.d_model,
            trend_window: self.trend_window,
            conv_kernel: self.conv_kernel,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(v: usize) -> ModelConfig {
        ModelConfig {
            lookback: 24,
            horizon: 8,
            n_vars: v,
            patch_len: 8,
            stride: 4,
            d_model: 4,
            d_hidden: 4,
            moe_layers: 2,
            ..Default::default()
        }
    }

    fn window(l: usize, v: usize) -> Tensor {
        Tensor::new(&[l, v], (0..l * v).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap()
    }

    #[test]
    fn etth1_shape() {
        let cfg = ModelConfig {
            n_vars: 7,
            d_model: 8,
            d_hidden: 8,
            ..ModelConfig::preset("etth1", 96).unwrap()
        };
        let m = Model::new(cfg).unwrap();
        let y = m.predict(&window(96, 7), 95).unwrap();
        assert_eq!(y.shape(), &[96, 7]);
    }

    #[test]
    fn zero_parameters_give_output_bias() {
        let mut m = Model::new(small(3)).unwrap();
        let ids: Vec<ParamId> = m.store.ids().collect();
        for id in ids {
            m.store.value_mut(id).data_mut().fill(0.0);
        }
        let bias: Vec<f64> = (0..8).map(|i| i as f64 - 2.5).collect();
        m.store
            .value_mut(m.structure.output.b)
            .data_mut()
            .copy_from_slice(&bias);
        let y = m.predict(&window(24, 3), 40).unwrap();
        for (t, &b) in bias.iter().enumerate() {
            assert!(y.row(t).iter().all(|&v| v == b));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = Model::new(small(2)).unwrap();
        let b = Model::new(small(2)).unwrap();
        let w = window(24, 2);
        assert_eq!(a.predict(&w, 23).unwrap(), b.predict(&w, 23).unwrap());
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn wrong_window_shape_is_rejected() {
        let m = Model::new(small(2)).unwrap();
        assert!(matches!(m.predict(&window(23, 2), 23), Err(Error::Dimension(_))));
    }
}
