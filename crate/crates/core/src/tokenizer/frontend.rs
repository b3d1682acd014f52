use crate::config::AudioConfig;
use crate::dsp::log_mel_with;
use crate::dsp::{AudioBuffer, MelFilterbank, MelFrames, StftPlan};

use super::TokenizerError;

/// Mel frames per latent frame.
pub const TIME_STRIDE: usize = 4;
/// Fixed affine normalization of log-mel values before any learned layer.
pub const MEL_CENTER: f64 = -2.5;
pub const MEL_SCALE: f64 = 5.0;

/// Log-mel analysis at the model's canonical configuration.
#[derive(Debug, Clone)]
pub struct Frontend {
    audio: AudioConfig,
    plan: StftPlan<f64>,
    bank: MelFilterbank,
}

impl Frontend {
    pub fn new(audio: &AudioConfig) -> Result<Self, TokenizerError> {
        Ok(Self {
            audio: audio.clone(),
            plan: StftPlan::new(audio.window_size, audio.hop)?,
            bank: MelFilterbank::new(audio.sample_rate, audio.window_size, audio.mel_bins)?,
        })
    }

    pub fn audio(&self) -> &AudioConfig {
        &self.audio
    }

    pub fn mel_rate(&self) -> f64 {
        self.audio.sample_rate as f64 / self.audio.hop as f64
    }

    pub fn latent_rate(&self) -> f64 {
        self.mel_rate() / TIME_STRIDE as f64
    }

    /// Waveform samples per latent frame.
    pub fn samples_per_latent(&self) -> usize {
        self.audio.hop * TIME_STRIDE
    }

    pub fn log_mel(&self, audio: &AudioBuffer) -> Result<MelFrames, TokenizerError> {
        if audio.sample_rate() != self.audio.sample_rate {
            return Err(TokenizerError::RateMismatch {
                expected: self.audio.sample_rate as f64,
                found: audio.sample_rate() as f64,
            });
        }
        Ok(log_mel_with(&self.plan, &self.bank, audio))
    }

    /// Log-mel padded with silence frames to a whole number of latent frames.
    pub fn latent_mel(&self, audio: &AudioBuffer) -> Result<MelFrames, TokenizerError> {
        Ok(self.log_mel(audio)?.pad_to_multiple(TIME_STRIDE))
    }
}

pub fn normalize_mel(values: &[f64]) -> Vec<f64> {
    values.iter().map(|v| (v - MEL_CENTER) / MEL_SCALE).collect()
}
