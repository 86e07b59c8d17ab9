//! Distribution-shift detection with a kernel two-sample statistic and an
//! adaptive k-sigma threshold.

mod detector;
mod mmd;

pub use detector::{scan, DetectorConfig, DriftDetector, DriftEvent, Evaluation, HistoryPolicy, ScoreHistory};
pub use mmd::{
    concentration_bound, median_bandwidth, mmd_squared_biased, mmd_squared_unbiased, rbf_kernel, WindowPair,
};
