use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::mmd::{median_bandwidth, mmd_squared_biased, WindowPair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bounded FIFO of recent squared-MMD scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHistory {
    scores: VecDeque<f64>,
    capacity: usize,
    min_fill: usize,
}

impl ScoreHistory {
    pub fn new(capacity: usize, min_fill: usize) -> Self {
        Self {
            scores: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
            min_fill: min_fill.max(1),
        }
    }

    pub fn push(&mut self, score: f64) {
        if self.scores.len() == self.capacity {
            self.scores.pop_front();
        }
        self.scores.push_back(score);
    }

    pub fn clear(&mut self) {
        self.scores.clear();
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn is_ready(&self) -> bool {
        self.scores.len() >= self.min_fill
    }

    pub fn scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores.iter().copied()
    }

    /// `μ + λσ` with the population standard deviation, or `None` during
    /// warm-up.
    pub fn threshold(&self, lambda: f64) -> Option<f64> {
        if !self.is_ready() {
            return None;
        }
        let n = self.scores.len() as f64;
        let mean = self.scores.iter().sum::<f64>() / n;
        let var = self.scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        Some(mean + lambda * var.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub ref_size: usize,
    pub cur_size: usize,
    pub history: usize,
    pub min_fill: usize,
    pub lambda: f64,
    /// What the score history does when a drift fires.
    pub on_drift: HistoryPolicy,
}

/// Score-history handling when a drift is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryPolicy {
    /// Keep the pre-drift scores and drop the drift score itself.
    Retain,
    /// Start over; the detector is blind until `min_fill` new scores arrive.
    Clear,
    /// Start over, but until the new history reaches `min_fill`, threshold
    /// against the most recent pre-drift windows re-scored against the new
    /// reference (pooled with whatever new scores exist).
    Rescore,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            ref_size: 96,
            cur_size: 96,
            history: 50,
            min_fill: 10,
            lambda: 3.0,
            on_drift: HistoryPolicy::Rescore,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ref_size < 2 || self.cur_size < 2 {
            return Err(Error::Config("detector windows need at least 2 samples".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config("detector lambda must be positive".into()));
        }
        if self.history == 0 || self.min_fill == 0 || self.min_fill > self.history {
            return Err(Error::Config("need 0 < min_fill <= history".into()));
        }
        Ok(())
    }
}

/// A detected shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    /// Index of the last sample of the current window.
    pub t: usize,
    pub score: f64,
    pub threshold: f64,
    pub reference: (usize, usize),
    pub current: (usize, usize),
}

/// One detector evaluation, as emitted by the `detect` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub t: usize,
    pub mmd2: f64,
    pub threshold: Option<f64>,
    pub drift: bool,
}

/// Reference window, cached bandwidth and score history for one stream.
#[derive(Debug, Clone)]
pub struct DriftDetector {
    config: DetectorConfig,
    reference: Tensor,
    ref_origin: usize,
    sigma: f64,
    history: ScoreHistory,
    previous: Option<ScoreHistory>,
    recent: VecDeque<Tensor>,
}

impl DriftDetector {
    pub fn new(config: DetectorConfig, reference: Tensor, ref_origin: usize) -> Result<Self> {
        config.validate()?;
        let sigma = median_bandwidth(&reference)?;
        let history = ScoreHistory::new(config.history, config.min_fill);
        Ok(Self {
            config,
            reference,
            ref_origin,
            sigma,
            history,
            previous: None,
            recent: VecDeque::new(),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn history(&self) -> &ScoreHistory {
        &self.history
    }

    pub fn reference_range(&self) -> (usize, usize) {
        (self.ref_origin, self.ref_origin + self.reference.rows())
    }

    /// Scores `current` against the reference. The threshold comes from the
    /// history before this score is added. On drift the reference becomes
    /// `current` and the history follows [`HistoryPolicy`].
    pub fn step(&mut self, current: Tensor, cur_origin: usize) -> Result<(Evaluation, Option<DriftEvent>)> {
        let pair = WindowPair::at(self.reference.clone(), current, self.ref_origin, cur_origin)?;
        let score = mmd_squared_biased(&pair, self.sigma)?;
        let lambda = self.config.lambda;
        let threshold = match (self.history.threshold(lambda), &self.previous) {
            (None, Some(prev)) => {
                let mut pooled = prev.clone();
                self.history.scores().for_each(|s| pooled.push(s));
                pooled.threshold(lambda)
            }
            (eps, _) => eps,
        };
        if self.history.is_ready() {
            self.previous = None;
        }
        let t = cur_origin + pair.current.rows() - 1;
        let drift = matches!(threshold, Some(eps) if score > eps);
        if !drift || self.config.on_drift != HistoryPolicy::Retain {
            self.history.push(score);
        }
        let event = if drift {
            let ev = DriftEvent {
                t,
                score,
                threshold: threshold.unwrap(),
                reference: self.reference_range(),
                current: (cur_origin, cur_origin + pair.current.rows()),
            };
            self.sigma = median_bandwidth(&pair.current)?;
            self.reference = pair.current.clone();
            self.ref_origin = cur_origin;
            match self.config.on_drift {
                HistoryPolicy::Retain => {}
                HistoryPolicy::Clear => self.history.clear(),
                HistoryPolicy::Rescore => {
                    self.history.clear();
                    let mut fallback = ScoreHistory::new(self.config.history, self.config.min_fill);
                    for w in &self.recent {
                        let p = WindowPair::new(self.reference.clone(), w.clone())?;
                        fallback.push(mmd_squared_biased(&p, self.sigma)?);
                    }
                    self.previous = fallback.is_ready().then_some(fallback);
                }
            }
            Some(ev)
        } else {
            if self.config.on_drift == HistoryPolicy::Rescore {
                if self.recent.len() == self.config.min_fill {
                    self.recent.pop_front();
                }
                self.recent.push_back(pair.current.clone());
            }
            None
        };
        Ok((
            Evaluation {
                t,
                mmd2: score,
                threshold,
                drift,
            },
            event,
        ))
    }
}

/// Runs a detector over `rows` (`T × V`): the first `ref_size` rows seed the
/// reference, then consecutive non-overlapping windows of `cur_size` rows
/// are scored.
pub fn scan(rows: &Tensor, config: &DetectorConfig) -> Result<(Vec<Evaluation>, Vec<DriftEvent>)> {
    config.validate()?;
    let total = rows.rows();
    if total < config.ref_size + config.cur_size {
        return Err(Error::Data(format!(
            "stream of {total} samples is shorter than one reference plus one current window"
        )));
    }
    let block = |start: usize, len: usize| {
        Tensor::new(
            &[len, rows.cols()],
            rows.data()[start * rows.cols()..(start + len) * rows.cols()].to_vec(),
        )
        .expect("block inside stream")
    };
    let mut det = DriftDetector::new(config.clone(), block(0, config.ref_size), 0)?;
    let mut evals = Vec::new();
    let mut events = Vec::new();
    let mut start = config.ref_size;
    while start + config.cur_size <= total {
        let (ev, drift) = det.step(block(start, config.cur_size), start)?;
        evals.push(ev);
        events.extend(drift);
        start += config.cur_size;
    }
    Ok((evals, events))
}
