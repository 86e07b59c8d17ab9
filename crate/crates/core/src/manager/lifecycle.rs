use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SeriesDataset;
use crate::drift::DriftEvent;
use crate::error::{Error, Result};
use crate::experts::Expert;
use crate::model::{batch_gradients, AdamW, Model};
use crate::params::ParamId;
use crate::tape::Tape;

use super::{profile, Action, EventRecord, ProfilerReport};

/// What the manager may touch while reacting to a drift event.
pub struct DriftContext<'a> {
    pub dataset: &'a SeriesDataset,
    /// Training window origins, chronological.
    pub origins: &'a [usize],
    /// Structural changes are only allowed while training.
    pub training: bool,
}

#[derive(Debug, Clone)]
pub struct DriftOutcome {
    pub event_id: u64,
    pub report: ProfilerReport,
    pub records: Vec<EventRecord>,
    /// Alignment losses, see [`align_new_experts`].
    pub alignment: Vec<f64>,
    /// Windows used for profiling and alignment.
    pub windows: Vec<usize>,
}

fn nearest(origins: &[usize], t: usize) -> usize {
    let i = origins.partition_point(|&o| o < t);
    match (i.checked_sub(1).map(|j| origins[j]), origins.get(i)) {
        (Some(a), Some(&b)) => {
            if t - a <= b - t {
                a
            } else {
                b
            }
        }
        (Some(a), None) => a,
        (None, Some(&b)) => b,
        (None, None) => unreachable!("origins are non-empty"),
    }
}

/// Training windows whose origin lies in the reference or current window of
/// `event`, thinned evenly to at most `max` windows.
pub fn drift_windows(origins: &[usize], event: &DriftEvent, max: usize) -> Vec<usize> {
    let inside = |o: &usize| {
        (event.reference.0..event.reference.1).contains(o) || (event.current.0..event.current.1).contains(o)
    };
    let mut picked: Vec<usize> = origins.iter().copied().filter(inside).collect();
    if picked.is_empty() {
        picked.push(nearest(origins, event.t));
    }
    if picked.len() > max {
        let n = picked.len();
        picked = (0..max).map(|i| picked[i * n / max]).collect();
    }
    picked
}

/// Profiles the model's residuals around `event`, archives the router state,
/// adds one expert of the dominant kind to every layer with room, and aligns
/// the new experts. Appends the resulting records to the model's event log.
pub fn on_drift(model: &mut Model, event: &DriftEvent, ctx: &DriftContext) -> Result<DriftOutcome> {
    if !ctx.training {
        return Err(Error::Contract("expert pool can only change during training".into()));
    }
    if ctx.origins.is_empty() {
        return Err(Error::Data("no training windows to profile".into()));
    }
    let cfg = model.config().clone();
    let windows = drift_windows(ctx.origins, event, cfg.manager.max_drift_windows);
    let mut series = Vec::with_capacity(windows.len() * cfg.n_vars);
    for &o in &windows {
        let w = ctx.dataset.window_at(o, cfg.lookback, cfg.horizon);
        let pred = model.predict(&w.input, o)?;
        for v in 0..cfg.n_vars {
            series.push((0..cfg.horizon).map(|t| w.target.get(t, v) - pred.get(t, v)).collect());
        }
    }
    let report = profile(&series)?;

    let event_id = model.structure.next_event;
    model.structure.next_event += 1;

    // router state at the window ending closest to the drift point
    let o = nearest(ctx.origins, event.t);
    let w = ctx.dataset.window_at(o, cfg.lookback, cfg.horizon);
    let states: Vec<Vec<f64>> = {
        let mut tape = Tape::inference(&model.store);
        let f = model.forward(&mut tape, &w.input, o)?;
        f.last_hidden
            .iter()
            .map(|&h| {
                let h = tape.value(h);
                (0..h.cols())
                    .map(|c| (0..h.rows()).map(|r| h.get(r, c)).sum::<f64>() / h.rows() as f64)
                    .collect()
            })
            .collect()
    };

    let mut records = Vec::new();
    let mut new_params = Vec::new();
    let shape = cfg.expert_shape();
    for (l, state) in states.iter().enumerate() {
        let store = &mut model.store;
        let layer = &mut model.structure.layers[l];
        layer.router.repo.archive(state, event_id);
        let base = EventRecord {
            event_id,
            t: event.t,
            mmd2: Some(event.score),
            threshold: Some(event.threshold),
            s_trend: Some(report.s_trend),
            s_sea: Some(report.s_sea),
            s_fluc: Some(report.s_fluc),
            action: Action::SkippedPoolFull,
            layer: l,
            expert_id: None,
            kind: Some(report.chosen),
        };
        if !layer.pool.has_room() {
            records.push(base);
            continue;
        }
        let id = layer.pool.take_id();
        let expert = match layer.pool.template(report.chosen) {
            Some(t) => t.duplicate(store, id, event_id),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (event_id + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut e = Expert::new(store, report.chosen, id, &shape, &mut rng)?;
                e.protected = false;
                e.created_at = Some(event_id);
                e
            }
        };
        new_params.extend(expert.param_ids());
        layer
            .router
            .head
            .grow(store, &format!("layer{l}.head{id}"), id, cfg.d_hidden);
        layer.pool.push(expert)?;
        records.push(EventRecord {
            action: Action::Added,
            expert_id: Some(id),
            ..base
        });
    }
    model.structure.events.extend(records.iter().cloned());

    let alignment = if new_params.is_empty() {
        Vec::new()
    } else {
        let lr = cfg.manager.align_lr.unwrap_or(cfg.train.lr);
        align_new_experts(model, &new_params, ctx.dataset, &windows, cfg.manager.align_steps, lr)?
    };
    Ok(DriftOutcome {
        event_id,
        report,
        records,
        alignment,
        windows,
    })
}

/// Full-batch AdamW on `windows`, updating only `expert_params` and every
/// router head row. Returns the loss before each step followed by the loss
/// after the last one (empty when `steps == 0`).
pub fn align_new_experts(
    model: &mut Model,
    expert_params: &[ParamId],
    dataset: &SeriesDataset,
    windows: &[usize],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Ok(Vec::new());
    }
    let mut trainable: BTreeSet<ParamId> = expert_params.iter().copied().collect();
    trainable.extend(model.head_params());
    let t = &model.config().train;
    let mut opt = AdamW::new(lr, t.beta1, t.beta2, t.eps, t.weight_decay);
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let batch = batch_gradients(model, dataset, windows, Some(&trainable))?;
        losses.push(batch.loss);
        opt.step(&mut model.store, &batch.grads, trainable.iter().copied());
    }
    losses.push(batch_gradients(model, dataset, windows, Some(&trainable))?.loss);
    Ok(losses)
}

/// Removes a drift expert whose usage stayed below the threshold for the
/// full patience, together with its head row and parameters.
pub fn prune(model: &mut Model, layer: usize, expert_id: u64, step: usize) -> Result<EventRecord> {
    let l = model
        .structure
        .layers
        .get_mut(layer)
        .ok_or_else(|| Error::Contract(format!("no layer {layer}")))?;
    let expert = l
        .pool
        .get(expert_id)
        .ok_or_else(|| Error::Contract(format!("no expert {expert_id} in layer {layer}")))?;
    if expert.protected {
        return Err(Error::Contract(format!(
            "expert {expert_id} is a protected base expert"
        )));
    }
    if !l.usage.is_candidate(expert_id) {
        return Err(Error::Contract(format!("expert {expert_id} is not a prune candidate")));
    }
    let removed = l.pool.remove(expert_id)?;
    l.router.head.shrink(&mut model.store, expert_id)?;
    for id in removed.param_ids() {
        model.store.remove(id);
    }
    l.usage.drop_expert(expert_id);
    let record = EventRecord {
        event_id: model.structure.next_event,
        t: step,
        mmd2: None,
        threshold: None,
        s_trend: None,
        s_sea: None,
        s_fluc: None,
        action: Action::Pruned,
        layer,
        expert_id: Some(expert_id),
        kind: Some(removed.kind),
    };
    model.structure.next_event += 1;
    model.structure.events.push(record.clone());
    Ok(record)
}
