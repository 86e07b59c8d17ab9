use serde::{Deserialize, Serialize};

use crate::data::{SeriesDataset, Split};
use crate::error::{Error, Result};
use crate::exec::map_ordered;
use crate::tensor::Tensor;

use super::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    /// `(mse, mae)` per forecast step.
    pub per_horizon: Vec<(f64, f64)>,
    /// Number of windows (predictions) averaged over.
    pub n_windows: usize,
}

/// MSE and MAE over all entries of matching `T × V` predictions.
pub fn mse_mae(preds: &[Tensor], truths: &[Tensor]) -> Result<MetricsReport> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::Contract(
            "metrics need equally many, non-zero predictions and targets".into(),
        ));
    }
    let t = preds[0].rows();
    let mut per = vec![(0.0, 0.0); t];
    let mut count = 0usize;
    for (p, y) in preds.iter().zip(truths) {
        if p.shape() != y.shape() || p.rows() != t {
            return Err(Error::Dimension(format!(
                "prediction {:?} vs target {:?}",
                p.shape(),
                y.shape()
            )));
        }
        for (h, acc) in per.iter_mut().enumerate() {
            for (a, b) in p.row(h).iter().zip(y.row(h)) {
                let e = b - a;
                acc.0 += e * e;
                acc.1 += e.abs();
            }
        }
        count += p.cols();
    }
    let total = (count * t) as f64;
    let mse = per.iter().map(|a| a.0).sum::<f64>() / total;
    let mae = per.iter().map(|a| a.1).sum::<f64>() / total;
    let per_horizon = per.iter().map(|&(s, a)| (s / count as f64, a / count as f64)).collect();
    Ok(MetricsReport {
        mse,
        mae,
        per_horizon,
        n_windows: preds.len(),
    })
}

/// Predictions and targets for every window of `split`, in time order.
pub fn predict_split(
    model: &Model,
    ds: &SeriesDataset,
    split: Split,
) -> Result<(Vec<usize>, Vec<Tensor>, Vec<Tensor>)> {
    let cfg = model.config();
    let origins: Vec<usize> = ds.window_origins(split, cfg.lookback, cfg.horizon)?.collect();
    let results = map_ordered(cfg.train.execution, &origins, |&o| {
        let w = ds.window_at(o, cfg.lookback, cfg.horizon);
        model.predict(&w.input, o).map(|p| (p, w.target))
    });
    let mut preds = Vec::with_capacity(origins.len());
    let mut truths = Vec::with_capacity(origins.len());
    for r in results {
        let (p, y) = r?;
        preds.push(p);
        truths.push(y);
    }
    Ok((origins, preds, truths))
}

/// Pure forward evaluation on normalized values; the model is not touched.
pub fn evaluate(model: &Model, ds: &SeriesDataset, split: Split) -> Result<MetricsReport> {
    if ds.n_vars() != model.config().n_vars {
        return Err(Error::Data(format!(
            "dataset has {} variables, model expects {}",
            ds.n_vars(),
            model.config().n_vars
        )));
    }
    let (_, preds, truths) = predict_split(model, ds, split)?;
    mse_mae(&preds, &truths)
}
