//! Series storage, train-split normalization, forecast windows and patching.

mod csv_io;
mod patch;
mod synth;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use csv_io::{load_csv, parse_csv, write_csv};
pub use patch::{embed_patches, patch_count, patch_matrix, PatchSequence};
pub use synth::{generate_stream, RegimeScript, Segment, SegmentKind, SegmentParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// How a series is divided chronologically into train/validation/test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    Fractions { train: f64, val: f64 },
    Counts { train: usize, val: usize, test: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions { train: 0.6, val: 0.2 }
    }
}

impl SplitSpec {
    /// `(train_end, val_end)` for a series of `total` rows.
    pub fn bounds(&self, total: usize) -> Result<(usize, usize)> {
        let (train_end, val_end) = match *self {
            SplitSpec::Fractions { train, val } => {
                if !(train > 0.0 && val > 0.0 && train + val <= 1.0) {
                    return Err(Error::Config(format!(
                        "split fractions train={train} val={val} must be positive and sum to at most 1"
                    )));
                }
                let te = (total as f64 * train).round() as usize;
                let ve = (total as f64 * (train + val)).round() as usize;
                (te, ve.min(total))
            }
            SplitSpec::Counts { train, val, test } => {
                if train + val + test > total {
                    return Err(Error::Data(format!(
                        "split counts ({train}, {val}, {test}) exceed the {total} available rows"
                    )));
                }
                (train, train + val)
            }
        };
        if !(0 < train_end && train_end < val_end && val_end <= total) {
            return Err(Error::Data(format!(
                "degenerate split bounds ({train_end}, {val_end}) for {total} rows"
            )));
        }
        Ok((train_end, val_end))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// A multivariate series with its chronological split and train-split
/// z-score statistics. Values are stored raw.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    pub name: String,
    /// `T_total × V`, row-major.
    values: Vec<f64>,
    n_vars: usize,
    pub timestamps: Vec<String>,
    pub columns: Vec<String>,
    train_end: usize,
    val_end: usize,
    norm: Vec<NormStats>,
    /// Ground-truth regime boundaries for synthetic streams.
    pub shifts: Vec<usize>,
}

impl SeriesDataset {
    pub fn new(
        name: impl Into<String>,
        values: Vec<f64>,
        n_vars: usize,
        timestamps: Vec<String>,
        columns: Vec<String>,
        split: SplitSpec,
    ) -> Result<Self> {
        if n_vars == 0 || values.is_empty() || !values.len().is_multiple_of(n_vars) {
            return Err(Error::Data("series must be a non-empty T×V matrix".into()));
        }
        let total = values.len() / n_vars;
        let (train_end, val_end) = split.bounds(total)?;
        let mut norm = Vec::with_capacity(n_vars);
        for v in 0..n_vars {
            let col: Vec<f64> = (0..train_end).map(|t| values[t * n_vars + v]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64;
            let std = var.sqrt();
            if !(std > 0.0) || !std.is_finite() {
                let label = columns.get(v).cloned().unwrap_or_else(|| format!("#{v}"));
                return Err(Error::Data(format!("column {label} is constant on the training split")));
            }
            norm.push(NormStats { mean, std });
        }
        Ok(Self {
            name: name.into(),
            values,
            n_vars,
            timestamps,
            columns,
            train_end,
            val_end,
            norm,
            shifts: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.n_vars
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn split_bounds(&self) -> (usize, usize) {
        (self.train_end, self.val_end)
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.train_end,
            Split::Val => self.train_end..self.val_end,
            Split::Test => self.val_end..self.len(),
        }
    }

    pub fn norm_stats(&self) -> &[NormStats] {
        &self.norm
    }

    pub fn raw(&self, t: usize, v: usize) -> f64 {
        self.values[t * self.n_vars + v]
    }

    pub fn raw_row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_vars..(t + 1) * self.n_vars]
    }

    pub fn normalize(&self, value: f64, v: usize) -> f64 {
        (value - self.norm[v].mean) / self.norm[v].std
    }

    pub fn denormalize(&self, value: f64, v: usize) -> f64 {
        value * self.norm[v].std + self.norm[v].mean
    }

    /// Train-normalized V-dim observation at time `t`.
    pub fn normalized_row(&self, t: usize) -> Vec<f64> {
        (0..self.n_vars).map(|v| self.normalize(self.raw(t, v), v)).collect()
    }

    /// Normalized rows `range` as `len × V`.
    pub fn normalized_block(&self, range: Range<usize>) -> Tensor {
        let rows = range.len();
        let data = range.flat_map(|t| self.normalized_row(t)).collect();
        Tensor::new(&[rows, self.n_vars], data).expect("non-empty block")
    }

    /// Window origins available in `split` for look-back `l` and horizon `t`.
    pub fn window_origins(&self, split: Split, l: usize, t: usize) -> Result<Range<usize>> {
        if l == 0 || t == 0 {
            return Err(Error::Parameter("look-back and horizon must be positive".into()));
        }
        let r = self.range(split);
        if r.len() < l + t {
            return Err(Error::Data(format!(
                "{split:?} split has {} points but a window needs {}",
                r.len(),
                l + t
            )));
        }
        Ok(r.start + l - 1..r.end - t)
    }

    /// The window whose input ends at `origin`.
    pub fn window_at(&self, origin: usize, l: usize, t: usize) -> ForecastWindow {
        ForecastWindow {
            input: self.normalized_block(origin + 1 - l..origin + 1),
            target: self.normalized_block(origin + 1..origin + 1 + t),
            origin,
        }
    }

    /// Stride-1 windows of `split` in chronological order.
    pub fn make_windows(&self, l: usize, t: usize, split: Split) -> Result<impl Iterator<Item = ForecastWindow> + '_> {
        let origins = self.window_origins(split, l, t)?;
        Ok(origins.map(move |o| self.window_at(o, l, t)))
    }

    /// Same split with new raw values; statistics are recomputed from the
    /// train rows of `values`.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        let mut out = Self::new(
            self.name.clone(),
            values,
            self.n_vars,
            self.timestamps.clone(),
            self.columns.clone(),
            SplitSpec::Counts {
                train: self.train_end,
                val: self.val_end - self.train_end,
                test: self.len() - self.val_end,
            },
        )?;
        out.shifts = self.shifts.clone();
        Ok(out)
    }

    pub fn raw_values(&self) -> &[f64] {
        &self.values
    }
}

/// One supervised example: look-back input and horizon target, both
/// normalized, with the absolute index of the last input step.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastWindow {
    /// `L × V`
    pub input: Tensor,
    /// `T × V`
    pub target: Tensor,
    pub origin: usize,
}
