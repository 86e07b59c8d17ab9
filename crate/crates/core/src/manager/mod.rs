//! Expert lifecycle: pool bookkeeping, drift profiling, usage tracking and
//! the structured event log.

mod lifecycle;
mod profiler;

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{Expert, ExpertKind};

pub use lifecycle::{align_new_experts, drift_windows, on_drift, prune, DriftContext, DriftOutcome};
pub use profiler::{profile, ProfilerReport, MIN_PROFILE_LEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManagerConfig {
    /// Mean gate weight below which a window counts as unused.
    pub tau: f64,
    /// Consecutive unused windows before a drift expert is pruned.
    pub patience: usize,
    /// Monitoring window length in optimizer steps.
    pub window_steps: usize,
    /// Cap on drift experts per layer.
    pub pool_cap: usize,
    pub align_steps: usize,
    /// Alignment learning rate; `None` uses the training rate.
    pub align_lr: Option<f64>,
    /// Upper bound on windows used for profiling and alignment.
    pub max_drift_windows: usize,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        Self {
            tau: 0.02,
            patience: 3,
            window_steps: 200,
            pool_cap: 3,
            align_steps: 50,
            align_lr: None,
            max_drift_windows: 64,
        }
    }
}

impl ManagerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) || self.patience == 0 || self.window_steps == 0 || self.max_drift_windows == 0 {
            return Err(Error::Config(
                "manager needs tau >= 0 and positive patience, window_steps, max_drift_windows".into(),
            ));
        }
        if matches!(self.align_lr, Some(lr) if !(lr > 0.0)) {
            return Err(Error::Config("align_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Base experts followed by drift experts, in head-row order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPool {
    pub experts: Vec<Expert>,
    pub cap: usize,
    pub next_id: u64,
}

impl ExpertPool {
    pub fn new(base: Vec<Expert>, cap: usize) -> Self {
        let next_id = base.iter().map(|e| e.id + 1).max().unwrap_or(0);
        Self {
            experts: base,
            cap,
            next_id,
        }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn base_count(&self) -> usize {
        self.experts.iter().filter(|e| e.protected).count()
    }

    pub fn drift_count(&self) -> usize {
        self.experts.iter().filter(|e| !e.protected).count()
    }

    pub fn has_room(&self) -> bool {
        self.drift_count() < self.cap
    }

    pub fn ids(&self) -> Vec<u64> {
        self.experts.iter().map(|e| e.id).collect()
    }

    pub fn get(&self, id: u64) -> Option<&Expert> {
        self.experts.iter().find(|e| e.id == id)
    }

    pub fn template(&self, kind: ExpertKind) -> Option<&Expert> {
        self.experts.iter().find(|e| e.protected && e.kind == kind)
    }

    pub fn take_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub(crate) fn push(&mut self, expert: Expert) -> Result<()> {
        if !expert.protected && !self.has_room() {
            return Err(Error::Contract(format!("drift pool is full ({} experts)", self.cap)));
        }
        self.experts.push(expert);
        Ok(())
    }

    pub(crate) fn remove(&mut self, id: u64) -> Result<Expert> {
        let pos = self
            .experts
            .iter()
            .position(|e| e.id == id)
            .ok_or_else(|| Error::Contract(format!("no expert {id}")))?;
        if self.experts[pos].protected {
            return Err(Error::Contract(format!("expert {id} is a protected base expert")));
        }
        Ok(self.experts.remove(pos))
    }
}

/// Per-expert mean routing weight per monitoring window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageTracker {
    pub tau: f64,
    pub patience: usize,
    pub window_steps: usize,
    steps: usize,
    sums: BTreeMap<u64, (f64, usize)>,
    history: BTreeMap<u64, VecDeque<f64>>,
}

impl UsageTracker {
    pub fn new(tau: f64, patience: usize, window_steps: usize) -> Self {
        Self {
            tau,
            patience,
            window_steps,
            steps: 0,
            sums: BTreeMap::new(),
            history: BTreeMap::new(),
        }
    }

    pub fn history(&self, id: u64) -> Option<&VecDeque<f64>> {
        self.history.get(&id)
    }

    /// Adds one step of mean gate weights (`weights[i]` for `ids[i]`).
    /// Returns true when this step closed a monitoring window.
    pub fn record_step(&mut self, ids: &[u64], weights: &[f64]) -> bool {
        for (&id, &w) in ids.iter().zip(weights) {
            let e = self.sums.entry(id).or_insert((0.0, 0));
            e.0 += w;
            e.1 += 1;
        }
        self.steps += 1;
        self.steps.is_multiple_of(self.window_steps)
    }

    /// Closes the current window and returns the prune candidates.
    pub fn close_window(&mut self, protected: impl Fn(u64) -> bool) -> Vec<u64> {
        let means: Vec<(u64, f64)> = std::mem::take(&mut self.sums)
            .into_iter()
            .map(|(id, (s, n))| (id, s / n as f64))
            .collect();
        self.track_window(&means, protected)
    }

    /// Appends one window of mean weights; candidates are unprotected experts
    /// whose last `patience` windows were all below `tau`.
    pub fn track_window(&mut self, means: &[(u64, f64)], protected: impl Fn(u64) -> bool) -> Vec<u64> {
        for &(id, m) in means {
            let h = self.history.entry(id).or_default();
            h.push_back(m);
            while h.len() > self.patience {
                h.pop_front();
            }
        }
        self.history
            .keys()
            .copied()
            .filter(|&id| !protected(id) && self.is_candidate(id))
            .collect()
    }

    pub fn is_candidate(&self, id: u64) -> bool {
        self.history
            .get(&id)
            .is_some_and(|h| h.len() == self.patience && h.iter().all(|&m| m < self.tau))
    }

    pub fn drop_expert(&mut self, id: u64) {
        self.sums.remove(&id);
        self.history.remove(&id);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Added,
    SkippedPoolFull,
    Pruned,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: u64,
    /// Stream index for drift events, optimizer step for pruning.
    pub t: usize,
    pub mmd2: Option<f64>,
    pub threshold: Option<f64>,
    pub s_trend: Option<f64>,
    pub s_sea: Option<f64>,
    pub s_fluc: Option<f64>,
    pub action: Action,
    pub layer: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub expert_id: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kind: Option<ExpertKind>,
}

pub fn write_event_log(mut out: impl Write, events: &[EventRecord]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e).map_err(|e| Error::Io(e.into()))?;
        writeln!(out)?;
    }
    Ok(())
}
