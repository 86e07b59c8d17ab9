use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SeriesDataset, Split};
use crate::drift::{DriftDetector, Evaluation};
use crate::error::{Error, Result};
use crate::exec::map_ordered;
use crate::manager::{on_drift, prune, DriftContext};
use crate::params::{ParamGrads, ParamId};
use crate::tape::Tape;

use super::metrics::evaluate;
use super::optim::AdamW;
use super::Model;

pub struct BatchResult {
    /// Mean per-window MSE.
    pub loss: f64,
    /// Gradient of `loss`.
    pub grads: ParamGrads,
    /// Per layer, each expert's gate weight averaged over all patches,
    /// variables and windows.
    pub gate_means: Vec<Vec<f64>>,
}

struct SampleResult {
    loss: f64,
    grads: ParamGrads,
    gate_sums: Vec<Vec<f64>>,
    rows: usize,
}

fn sample(
    model: &Model,
    ds: &SeriesDataset,
    origin: usize,
    trainable: Option<&BTreeSet<ParamId>>,
) -> Result<SampleResult> {
    let cfg = model.config();
    let w = ds.window_at(origin, cfg.lookback, cfg.horizon);
    let mut tape = match trainable {
        Some(set) => Tape::training_subset(&model.store, set),
        None => Tape::training(&model.store),
    };
    let f = model.forward(&mut tape, &w.input, origin)?;
    let target = tape.constant(w.target);
    let loss = tape.mse(f.pred, target)?;
    let mut gate_sums = Vec::with_capacity(f.gates.len());
    let mut rows = 0;
    for &g in &f.gates {
        let g = tape.value(g);
        rows = g.rows();
        let mut sums = vec![0.0; g.cols()];
        for r in 0..g.rows() {
            for (s, x) in sums.iter_mut().zip(g.row(r)) {
                *s += x;
            }
        }
        gate_sums.push(sums);
    }
    let grads = tape.backward(loss)?.into_params();
    Ok(SampleResult {
        loss: tape.value(loss).data()[0],
        grads,
        gate_sums,
        rows,
    })
}

/// Mean loss and gradient over the windows ending at `origins`. Samples run
/// under the configured [`crate::exec::Execution`]; gradients are summed in
/// window order, so the result does not depend on it.
pub fn batch_gradients(
    model: &Model,
    ds: &SeriesDataset,
    origins: &[usize],
    trainable: Option<&BTreeSet<ParamId>>,
) -> Result<BatchResult> {
    if origins.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let results = map_ordered(model.config().train.execution, origins, |&o| {
        sample(model, ds, o, trainable)
    });
    let mut grads = ParamGrads::new();
    let mut loss = 0.0;
    let mut gate_sums: Vec<Vec<f64>> = Vec::new();
    let mut rows = 0usize;
    for r in results {
        let r = r?;
        loss += r.loss;
        grads.accumulate(&r.grads);
        if gate_sums.is_empty() {
            gate_sums = r.gate_sums;
        } else {
            for (acc, s) in gate_sums.iter_mut().zip(&r.gate_sums) {
                acc.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            }
        }
        rows += r.rows;
    }
    let b = origins.len() as f64;
    grads.scale(1.0 / b);
    for g in &mut gate_sums {
        g.iter_mut().for_each(|x| *x /= rows as f64);
    }
    Ok(BatchResult {
        loss: loss / b,
        grads,
        gate_means: gate_sums,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub loss_curve: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub steps: usize,
    /// Every detector evaluation on the training stream.
    pub detector: Vec<Evaluation>,
    /// One alignment loss curve per drift event that added experts.
    pub alignment: Vec<Vec<f64>>,
}

/// Streams the normalized training rows through the detector, one current
/// window per call, independent of batch order.
struct StreamMonitor {
    detector: DriftDetector,
    rows: crate::tensor::Tensor,
    offset: usize,
    cursor: usize,
    cur: usize,
}

impl StreamMonitor {
    fn new(model: &Model, ds: &SeriesDataset) -> Result<Option<Self>> {
        let cfg = &model.config().detector;
        let range = ds.range(Split::Train);
        if range.len() < cfg.ref_size + cfg.cur_size {
            log::warn!("training split too short for drift detection");
            return Ok(None);
        }
        let rows = ds.normalized_block(range.clone());
        let reference = ds.normalized_block(range.start..range.start + cfg.ref_size);
        Ok(Some(Self {
            detector: DriftDetector::new(cfg.clone(), reference, range.start)?,
            rows,
            offset: range.start,
            cursor: cfg.ref_size,
            cur: cfg.cur_size,
        }))
    }

    fn next(&mut self) -> Result<Option<(Evaluation, Option<crate::drift::DriftEvent>)>> {
        if self.cursor + self.cur > self.rows.rows() {
            return Ok(None);
        }
        let c = self.rows.cols();
        let block = crate::tensor::Tensor::new(
            &[self.cur, c],
            self.rows.data()[self.cursor * c..(self.cursor + self.cur) * c].to_vec(),
        )?;
        let out = self.detector.step(block, self.offset + self.cursor)?;
        self.cursor += self.cur;
        Ok(Some(out))
    }
}

/// Trains with shuffled mini-batches and AdamW, keeps the best model by
/// validation MSE, and (when `train.adapt` is set) grows and prunes the
/// expert pools as the detector fires on the training stream.
pub fn train(model: &mut Model, ds: &SeriesDataset) -> Result<TrainReport> {
    let cfg = model.config().clone();
    if ds.n_vars() != cfg.n_vars {
        return Err(Error::Data(format!(
            "dataset has {} variables, model expects {}",
            ds.n_vars(),
            cfg.n_vars
        )));
    }
    let tc = &cfg.train;
    let origins: Vec<usize> = ds.window_origins(Split::Train, cfg.lookback, cfg.horizon)?.collect();
    let has_val = ds.window_origins(Split::Val, cfg.lookback, cfg.horizon).is_ok();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut opt = AdamW::new(tc.lr, tc.beta1, tc.beta2, tc.eps, tc.weight_decay);
    let mut monitor = if tc.adapt { StreamMonitor::new(model, ds)? } else { None };
    let mut report = TrainReport::default();
    let mut best: Option<(f64, Model)> = None;
    let mut since_best = 0;
    let mut order = origins.clone();
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(tc.batch_size) {
            let br = batch_gradients(model, ds, batch, None)?;
            loss_sum += br.loss;
            batches += 1;
            let ids: Vec<ParamId> = model.store.ids().collect();
            opt.step(&mut model.store, &br.grads, ids);
            report.steps += 1;
            track_usage(model, &br.gate_means, report.steps, tc.adapt)?;
            opt_retain(&mut opt, model);
            if report.steps % tc.detect_every == 0 {
                if let Some(mon) = monitor.as_mut() {
                    if let Some((ev, drift)) = mon.next()? {
                        report.detector.push(ev);
                        if let Some(event) = drift {
                            let ctx = DriftContext {
                                dataset: ds,
                                origins: &origins,
                                training: true,
                            };
                            let outcome = on_drift(model, &event, &ctx)?;
                            if !outcome.alignment.is_empty() {
                                report.alignment.push(outcome.alignment);
                            }
                        }
                    }
                }
            }
        }
        let train_mse = loss_sum / batches as f64;
        let val_mse = if has_val {
            evaluate(model, ds, Split::Val)?.mse
        } else {
            train_mse
        };
        report.loss_curve.push(EpochLoss {
            epoch,
            train_mse,
            val_mse,
        });
        report.epochs_run = epoch + 1;
        if best.as_ref().is_none_or(|(b, _)| val_mse < *b) {
            best = Some((val_mse, model.clone()));
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(report)
}

fn opt_retain(opt: &mut AdamW, model: &Model) {
    opt.retain(|id| model.store.contains(id));
}

fn track_usage(model: &mut Model, gate_means: &[Vec<f64>], step: usize, adapt: bool) -> Result<()> {
    let mut to_prune = Vec::new();
    for (l, layer) in model.structure.layers.iter_mut().enumerate() {
        let ids = layer.pool.ids();
        if layer.usage.record_step(&ids, &gate_means[l]) {
            let pool = &layer.pool;
            let candidates = layer.usage.close_window(|id| pool.get(id).is_none_or(|e| e.protected));
            to_prune.extend(candidates.into_iter().map(|id| (l, id)));
        }
    }
    if adapt {
        for (l, id) in to_prune {
            prune(model, l, id, step)?;
        }
    }
    Ok(())
}
