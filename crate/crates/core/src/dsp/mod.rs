//! Audio I/O and time-frequency transforms.
//!
//! Everything here is a pure function of its inputs. The STFT plan is generic
//! over the scalar type so the autodiff engine can reuse the same framing and
//! FFT code for its differentiable spectral primitives.

mod mel;
mod resample;
mod stft;
mod wav;

use std::path::PathBuf;

pub(crate) use mel::log_mel_with;
pub use mel::{hz_to_mel, mel_spectrogram, mel_to_hz, MelFilterbank, MelFrames, LOG_FLOOR};
pub use resample::{resample, RESAMPLE_HALF_WIDTH};
pub use stft::{hann_window, istft, stft, StftFrames, StftPlan};
pub use wav::{load_wav, write_wav};

/// Sample rate every stage of the pipeline runs at.
pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, thiserror::Error)]
pub enum DspError {
    #[error("audio file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("unsupported audio format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },
    #[error("audio file {0} contains no samples")]
    EmptyAudio(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error("audio samples must be finite")]
    NonFinite,
    #[error("window size {0} must be a power of two")]
    WindowNotPowerOfTwo(usize),
    #[error("invalid window size {0}")]
    InvalidWindow(usize),
    #[error("hop {hop} must be in 1..={window}")]
    InvalidHop { hop: usize, window: usize },
    #[error("window {window} with hop {hop} does not satisfy the overlap-add condition")]
    NotCola { window: usize, hop: usize },
    #[error("mel bin count must be at least 1")]
    InvalidMelBins,
}

/// Mono waveform with amplitudes nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, DspError> {
        if sample_rate == 0 {
            return Err(DspError::InvalidSampleRate);
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(DspError::NonFinite);
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate: sample_rate.max(1) }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Copy zero-padded or truncated to exactly `len` samples.
    pub fn fit_to(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self { samples, sample_rate: self.sample_rate }
    }
}
