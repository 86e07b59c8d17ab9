use serde::{Deserialize, Serialize};

use crate::data::{patch_count, SplitSpec};
use crate::drift::DetectorConfig;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::experts::ExpertKind;
use crate::manager::{ManagerConfig, MIN_PROFILE_LEN};
use crate::router::RouterKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Enables drift detection and structural adaptation.
    pub adapt: bool,
    /// Optimizer steps between detector evaluations.
    pub detect_every: usize,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1.2e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 256,
            epochs: 30,
            patience: 10,
            adapt: true,
            detect_every: 1,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    /// Number of variables; 0 means "take it from the data".
    pub n_vars: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub top_k: usize,
    pub moe_layers: usize,
    pub base_roster: Vec<ExpertKind>,
    pub trend_window: usize,
    pub conv_kernel: usize,
    pub cycle_len: usize,
    pub repo_capacity: usize,
    pub router: RouterKind,
    pub seed: u64,
    /// Chronological train/validation/test division of the data file.
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub manager: ManagerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            n_vars: 0,
            patch_len: 48,
            stride: 12,
            d_model: 16,
            d_hidden: 16,
            top_k: 3,
            moe_layers: 2,
            base_roster: ExpertKind::ALL.to_vec(),
            trend_window: 3,
            conv_kernel: 3,
            cycle_len: 24,
            repo_capacity: 16,
            router: RouterKind::Gru,
            seed: 0,
            split: SplitSpec::default(),
            train: TrainConfig::default(),
            detector: DetectorConfig::default(),
            manager: ManagerConfig::default(),
        }
    }
}

/// Per-dataset patching and optimisation settings:
/// `(dataset, horizon, P, S, lr, MoE layers, batch size)`.
const PRESETS: &[(&str, usize, usize, usize, f64, usize, usize)] = &[
    ("etth1", 96, 48, 12, 1.2e-3, 2, 256),
    ("etth1", 192, 48, 12, 8e-4, 2, 256),
    ("etth1", 336, 48, 12, 4e-4, 1, 256),
    ("etth1", 720, 48, 12, 4e-4, 1, 256),
    ("etth2", 96, 24, 6, 8e-4, 2, 256),
    ("etth2", 192, 24, 6, 4e-4, 2, 256),
    ("etth2", 336, 24, 6, 4e-4, 2, 256),
    ("etth2", 720, 24, 6, 4e-4, 2, 256),
    ("ettm1", 96, 48, 12, 4e-4, 2, 256),
    ("ettm1", 192, 48, 12, 4e-4, 2, 256),
    ("ettm1", 336, 24, 12, 1.6e-3, 2, 256),
    ("ettm1", 720, 48, 12, 4e-4, 2, 256),
    ("ettm2", 96, 48, 6, 8e-4, 2, 256),
    ("ettm2", 192, 48, 6, 8e-4, 1, 256),
    ("ettm2", 336, 48, 6, 4e-4, 1, 256),
    ("ettm2", 720, 24, 12, 1.2e-3, 1, 256),
    ("traffic", 96, 48, 6, 2.4e-3, 2, 32),
    ("traffic", 192, 48, 6, 1.2e-3, 2, 32),
    ("traffic", 336, 48, 6, 1.8e-3, 2, 32),
    ("traffic", 720, 48, 6, 2.4e-3, 2, 32),
    ("electricity", 96, 24, 6, 8e-4, 2, 32),
    ("electricity", 192, 24, 6, 8e-4, 2, 32),
    ("electricity", 336, 24, 6, 1.2e-3, 2, 32),
    ("electricity", 720, 24, 6, 8e-4, 2, 32),
    ("weather", 96, 96, 24, 1.2e-3, 1, 256),
    ("weather", 192, 96, 24, 4e-4, 1, 256),
    ("weather", 336, 96, 48, 6e-4, 2, 256),
    ("weather", 720, 48, 48, 1.2e-3, 1, 256),
    ("ili", 24, 24, 4, 8e-4, 2, 64),
    ("ili", 36, 24, 2, 4e-4, 2, 64),
    ("ili", 48, 24, 4, 8e-4, 2, 64),
    ("ili", 60, 24, 2, 4e-4, 1, 64),
    ("exchange", 96, 16, 8, 4e-4, 2, 128),
    ("exchange", 192, 16, 8, 4e-4, 1, 128),
    ("exchange", 336, 32, 8, 8e-4, 1, 128),
    ("exchange", 720, 16, 8, 4e-4, 2, 128),
];

impl ModelConfig {
    /// Benchmark preset, e.g. `("ETTh1", 96)`. ILI uses a 36-step
    /// look-back, every other dataset 96.
    pub fn preset(dataset: &str, horizon: usize) -> Result<Self> {
        let name = dataset.to_ascii_lowercase();
        let &(_, _, p, s, lr, layers, batch) = PRESETS
            .iter()
            .find(|row| row.0 == name && row.1 == horizon)
            .ok_or_else(|| Error::Config(format!("no preset for dataset {dataset:?} at horizon {horizon}")))?;
        let mut cfg = Self {
            lookback: if name == "ili" { 36 } else { 96 },
            horizon,
            patch_len: p,
            stride: s,
            moe_layers: layers,
            ..Self::default()
        };
        cfg.train.lr = lr;
        cfg.train.batch_size = batch;
        Ok(cfg)
    }

    pub fn preset_names() -> impl Iterator<Item = (&'static str, usize)> {
        PRESETS.iter().map(|r| (r.0, r.1))
    }

    pub fn n_patches(&self) -> Result<usize> {
        patch_count(self.lookback, self.patch_len, self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("n_vars", self.n_vars),
            ("patch_len", self.patch_len),
            ("stride", self.stride),
            ("d_model", self.d_model),
            ("d_hidden", self.d_hidden),
            ("top_k", self.top_k),
            ("moe_layers", self.moe_layers),
            ("trend_window", self.trend_window),
            ("conv_kernel", self.conv_kernel),
            ("cycle_len", self.cycle_len),
            ("repo_capacity", self.repo_capacity),
            ("train.batch_size", self.train.batch_size),
            ("train.detect_every", self.train.detect_every),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{key} must be positive")));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!("d_model must be even, got {}", self.d_model)));
        }
        if self.base_roster.is_empty() {
            return Err(Error::Config("base_roster must name at least one expert".into()));
        }
        if self.top_k > self.base_roster.len() {
            return Err(Error::Config(format!(
                "top_k {} exceeds the {} base experts",
                self.top_k,
                self.base_roster.len()
            )));
        }
        let n = self.n_patches().map_err(|e| Error::Config(e.to_string()))?;
        if self.trend_window > n {
            return Err(Error::Config(format!(
                "trend_window {} exceeds the {n} patches per window",
                self.trend_window
            )));
        }
        let t = &self.train;
        if !(t.lr > 0.0) || !(t.weight_decay >= 0.0) || !(t.eps > 0.0) {
            return Err(Error::Config(
                "train.lr and train.eps must be positive, weight_decay >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("train.beta1 and train.beta2 must lie in [0, 1)".into()));
        }
        if t.adapt && self.horizon < MIN_PROFILE_LEN {
            return Err(Error::Config(format!(
                "adaptation profiles horizon-length residuals and needs horizon >= {MIN_PROFILE_LEN}"
            )));
        }
        self.detector.validate()?;
        self.manager.validate()?;
        Ok(())
    }
}
