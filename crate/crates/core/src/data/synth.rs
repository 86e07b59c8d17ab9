//! Scripted piecewise-stationary streams with known regime boundaries.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{SeriesDataset, SplitSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    /// Constant mean plus noise.
    Level,
    /// Linear drift from the segment start.
    Trend,
    /// Sinusoid of given period and amplitude.
    Sinusoid,
    /// AR(1) noise process.
    Ar1,
}

/// Every segment evaluates
/// `mean + slope·τ + amplitude·sin(2πτ/period + φ_v) + e_τ` with
/// `e_τ = phi·e_{τ-1} + noise_std·ε`, where `τ` counts from the segment start
/// and `φ_v` offsets the phase per variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentParams {
    #[serde(default)]
    pub mean: f64,
    #[serde(default)]
    pub slope: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "default_period")]
    pub period: f64,
    #[serde(default)]
    pub phi: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
}

fn default_period() -> f64 {
    24.0
}

fn default_noise() -> f64 {
    1.0
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            mean: 0.0,
            slope: 0.0,
            amplitude: 0.0,
            period: default_period(),
            phi: 0.0,
            noise_std: default_noise(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub kind: SegmentKind,
    pub length: usize,
    #[serde(default)]
    pub params: SegmentParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeScript {
    pub seed: u64,
    #[serde(default = "one")]
    pub variables: usize,
    #[serde(default)]
    pub split: SplitSpec,
    pub segments: Vec<Segment>,
}

fn one() -> usize {
    1
}

impl RegimeScript {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn total_length(&self) -> usize {
        self.segments.iter().map(|s| s.length).sum()
    }

    /// Start index of every segment after the first.
    pub fn shift_indices(&self) -> Vec<usize> {
        self.segments
            .iter()
            .scan(0, |acc, s| {
                *acc += s.length;
                Some(*acc)
            })
            .take(self.segments.len().saturating_sub(1))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Parameter("regime script has no segments".into()));
        }
        if self.variables == 0 {
            return Err(Error::Parameter("regime script needs at least one variable".into()));
        }
        for (i, s) in self.segments.iter().enumerate() {
            let p = &s.params;
            let bad = |m: &str| Err(Error::Parameter(format!("segment {i}: {m}")));
            if s.length == 0 {
                return bad("length must be positive");
            }
            if !(p.noise_std >= 0.0) || !(p.period > 0.0) || !(p.phi.abs() < 1.0) {
                return bad("need noise_std >= 0, period > 0 and |phi| < 1");
            }
            match s.kind {
                SegmentKind::Trend if p.slope == 0.0 => return bad("trend segment needs a slope"),
                SegmentKind::Sinusoid if p.amplitude == 0.0 => return bad("sinusoid segment needs an amplitude"),
                SegmentKind::Ar1 if p.phi == 0.0 => return bad("ar1 segment needs phi"),
                _ => {}
            }
        }
        Ok(())
    }
}

/// Deterministic stream for `script`; the dataset's `shifts` hold the
/// segment boundaries.
pub fn generate_stream(script: &RegimeScript) -> Result<SeriesDataset> {
    script.validate()?;
    let vars = script.variables;
    let total = script.total_length();
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
    let mut values = Vec::with_capacity(total * vars);
    let mut ar_state = vec![0.0; vars];
    for seg in &script.segments {
        let p = &seg.params;
        for tau in 0..seg.length {
            for (v, e) in ar_state.iter_mut().enumerate() {
                let phase = 2.0 * PI * v as f64 / vars as f64;
                let eps: f64 = StandardNormal.sample(&mut rng);
                *e = p.phi * *e + p.noise_std * eps;
                let tau = tau as f64;
                values.push(p.mean + p.slope * tau + p.amplitude * (2.0 * PI * tau / p.period + phase).sin() + *e);
            }
        }
    }
    let mut ds = SeriesDataset::new(
        "synthetic",
        values,
        vars,
        (0..total).map(|t| t.to_string()).collect(),
        (0..vars).map(|v| format!("x{v}")).collect(),
        script.split,
    )?;
    ds.shifts = script.shift_indices();
    Ok(ds)
}
