//! Evaluation: reconstruction distances, real-time factor and linear probes.

mod probe;
mod rtf;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use probe::{
    linear_probe, make_probe_dataset, pooled_features, spectral_centroid, FeatureKind, ProbeDataset, ProbeOptions,
    ProbeResult, MAX_PROBE_CLASSES,
};
pub use rtf::{measure_rtf, measure_rtf_with, Clock, RtfReport, SystemClock};

use crate::dsp::{AudioBuffer, DspError, MelFilterbank, StftPlan, LOG_FLOOR};
use crate::tokenizer::TokenizerError;

/// Reference analysis of both distances.
pub const DISTANCE_WINDOW: usize = 1024;
pub const DISTANCE_HOP: usize = 256;
pub const DISTANCE_MEL_BINS: usize = 80;
/// Floor inside the log-magnitude of [`stft_distance`].
pub const MAGNITUDE_FLOOR: f64 = 1e-5;
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation corpus is empty")]
    EmptyCorpus,
    #[error("probe split is degenerate: {0}")]
    DegenerateSplit(String),
    #[error("probe needs between 2 and {max} classes, got {found}")]
    Classes { found: usize, max: usize },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Grad(#[from] crate::grad::GradError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

fn padded(x: &AudioBuffer, x_hat: &AudioBuffer) -> (AudioBuffer, AudioBuffer) {
    let n = x.len().max(x_hat.len());
    (x.fit_to(n), x_hat.fit_to(n))
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64
}

/// Mean L1 distance between natural-log mel spectrograms (1024/256, 80 bins),
/// shorter input zero-padded. Symmetric; zero on identical inputs.
pub fn mel_distance(x: &AudioBuffer, x_hat: &AudioBuffer) -> f64 {
    let (a, b) = padded(x, x_hat);
    let plan = StftPlan::<f64>::new(DISTANCE_WINDOW, DISTANCE_HOP).expect("reference plan");
    let bank = MelFilterbank::new(x.sample_rate(), DISTANCE_WINDOW, DISTANCE_MEL_BINS).expect("reference bank");
    let log_mel = |s: &AudioBuffer| {
        let (power, _) = plan.power(s.samples());
        bank.project(&power).into_iter().map(|e| (e + LOG_FLOOR).ln()).collect::<Vec<_>>()
    };
    mean_abs_diff(&log_mel(&a), &log_mel(&b))
}

/// Mean L1 distance between `ln(|STFT| + 1e-5)` (1024/256). Symmetric; zero
/// on identical inputs.
pub fn stft_distance(x: &AudioBuffer, x_hat: &AudioBuffer) -> f64 {
    let (a, b) = padded(x, x_hat);
    let plan = StftPlan::<f64>::new(DISTANCE_WINDOW, DISTANCE_HOP).expect("reference plan");
    let log_mag = |s: &AudioBuffer| {
        let (power, _) = plan.power(s.samples());
        power.into_iter().map(|p| (p.sqrt() + MAGNITUDE_FLOOR).ln()).collect::<Vec<_>>()
    };
    mean_abs_diff(&log_mag(&a), &log_mag(&b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileMetrics {
    pub file: String,
    pub values: BTreeMap<String, f64>,
}

/// Per-file metrics with their mean; `aggregate` always equals the per-file mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub format_version: u32,
    pub suite: String,
    pub seed: u64,
    pub config: Value,
    pub per_file: Vec<FileMetrics>,
    pub aggregate: BTreeMap<String, f64>,
    /// Suite-level values that are not per-file means.
    #[serde(default)]
    pub summary: BTreeMap<String, Value>,
}

impl MetricReport {
    pub fn new(suite: &str, seed: u64, config: Value, per_file: Vec<FileMetrics>) -> Self {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for f in &per_file {
            for (k, v) in &f.values {
                let e = sums.entry(k.clone()).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        let aggregate = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
        Self { format_version: REPORT_VERSION, suite: suite.to_string(), seed, config, per_file, aggregate, summary: BTreeMap::new() }
    }
}
