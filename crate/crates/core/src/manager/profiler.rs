use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertKind;
use crate::fft;

/// Shortest residual series the spectral scores are defined for.
pub const MIN_PROFILE_LEN: usize = 8;
const TOP_BINS: usize = 3;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilerReport {
    pub s_trend: f64,
    pub s_sea: f64,
    pub s_fluc: f64,
    pub chosen: ExpertKind,
    /// Every series had zero variance; scores are all zero.
    pub degenerate: bool,
    pub n_series: usize,
    pub residual_mean: f64,
    pub residual_std: f64,
}

struct Scores {
    trend: f64,
    sea: f64,
    fluc: f64,
}

/// Per-series normalisation `(e − μ)/(σ + 1e−8)` with population σ.
fn normalize(e: &[f64]) -> Vec<f64> {
    let n = e.len() as f64;
    let mu = e.iter().sum::<f64>() / n;
    let sd = (e.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
    e.iter().map(|x| (x - mu) / (sd + EPS)).collect()
}

/// R² of a least-squares line over `t ∈ [−1, 1]`, floored at 0.
fn trend_score(x: &[f64], energy: f64) -> f64 {
    let n = x.len();
    let t: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let tm = t.iter().sum::<f64>() / n as f64;
    let xm = x.iter().sum::<f64>() / n as f64;
    let stt: f64 = t.iter().map(|ti| (ti - tm).powi(2)).sum();
    let stx: f64 = t.iter().zip(x).map(|(ti, xi)| (ti - tm) * (xi - xm)).sum();
    let slope = stx / stt;
    let icpt = xm - slope * tm;
    let ss_res: f64 = t.iter().zip(x).map(|(ti, xi)| (xi - icpt - slope * ti).powi(2)).sum();
    (1.0 - ss_res / energy).max(0.0)
}

fn series_scores(e: &[f64]) -> Option<Scores> {
    let x = normalize(e);
    let energy: f64 = x.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return None;
    }
    let n = x.len();
    let spec = fft::rfft(&x);
    // one-sided power with the real-signal fold, DC excluded
    let power: Vec<(usize, f64)> = spec
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, z)| (k, fft::fold_weight(k, n) * z.norm_sqr()))
        .collect();
    let total: f64 = power.iter().map(|(_, p)| p).sum();
    if total == 0.0 {
        return None;
    }
    // The Nyquist bin is a pure alternation, not a periodic pattern the
    // seasonality expert models, so it never counts as a dominant frequency.
    let nyquist = n.is_multiple_of(2).then_some(n / 2);
    let mut periodic: Vec<f64> = power
        .iter()
        .filter(|(k, _)| Some(*k) != nyquist)
        .map(|(_, p)| *p)
        .collect();
    periodic.sort_by(|a, b| b.total_cmp(a));
    let top: f64 = periodic.iter().take(TOP_BINS).sum();
    // bin k sits at k/n cycles per sample; f_Nyq = 1/2
    let high: f64 = power.iter().filter(|(k, _)| 4 * k > n).map(|(_, p)| p).sum();
    Some(Scores {
        trend: trend_score(&x, energy),
        sea: top / total,
        fluc: high / total,
    })
}

/// Scores a set of residual series (one per window and variable) and picks
/// the dominant missing pattern. Ties resolve Trend, then Seasonality, then
/// Fluctuation.
pub fn profile(series: &[Vec<f64>]) -> Result<ProfilerReport> {
    if series.is_empty() {
        return Err(Error::Data("profiler needs at least one residual series".into()));
    }
    if let Some(s) = series.iter().find(|s| s.len() < MIN_PROFILE_LEN) {
        return Err(Error::Parameter(format!(
            "residual series of length {} is shorter than {MIN_PROFILE_LEN}",
            s.len()
        )));
    }
    if series.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("residuals contain non-finite values".into()));
    }
    let count = series.len() as f64;
    let (mut st, mut ss, mut sf) = (0.0, 0.0, 0.0);
    let mut live = 0;
    for s in series {
        if let Some(sc) = series_scores(s) {
            st += sc.trend;
            ss += sc.sea;
            sf += sc.fluc;
            live += 1;
        }
    }
    let (st, ss, sf) = (st / count, ss / count, sf / count);
    let all: Vec<f64> = series.iter().flatten().copied().collect();
    let m = all.iter().sum::<f64>() / all.len() as f64;
    let sd = (all.iter().map(|x| (x - m).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    let chosen = if st >= ss && st >= sf {
        ExpertKind::Trend
    } else if ss >= sf {
        ExpertKind::Seasonality
    } else {
        ExpertKind::Fluctuation
    };
    Ok(ProfilerReport {
        s_trend: st,
        s_sea: ss,
        s_fluc: sf,
        chosen,
        degenerate: live == 0,
        n_series: series.len(),
        residual_mean: m,
        residual_std: sd,
    })
}
