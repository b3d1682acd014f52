use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::frontend::{normalize_mel, TIME_STRIDE};
use super::TokenizerError;
use crate::dsp::MelFrames;
use crate::features::FeatureSequence;
use crate::grad::kernels::matmul_nn;
use crate::rng::{stream, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub seed: u64,
    pub d_high: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { seed: 17, d_high: 64 }
    }
}

/// Frozen random affine–tanh–affine map from mel frames to high-dimensional
/// features, mean-pooled to the latent rate.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEncoder {
    seed: u64,
    mel_bins: usize,
    d_high: usize,
    mel_rate: f64,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl TeacherEncoder {
    pub fn new(config: &TeacherConfig, mel_bins: usize, mel_rate: f64) -> Self {
        let (f, h) = (mel_bins, config.d_high);
        let mut rng = stream(config.seed, &[tag::TEACHER]);
        let mut draw = |n: usize, std: f64| -> Vec<f64> {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        let w1 = draw(f * h, 2.0 / (f as f64).sqrt());
        let b1 = draw(h, 0.5);
        let w2 = draw(h * h, 1.0 / (h as f64).sqrt());
        let b2 = draw(h, 0.1);
        Self { seed: config.seed, mel_bins, d_high: h, mel_rate, w1, b1, w2, b2 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn d_high(&self) -> usize {
        self.d_high
    }

    /// Named parameter arrays, for checkpoint echo.
    pub fn arrays(&self) -> [(&'static str, Vec<usize>, &[f64]); 4] {
        [
            ("w1", vec![self.mel_bins, self.d_high], &self.w1),
            ("b1", vec![self.d_high], &self.b1),
            ("w2", vec![self.d_high, self.d_high], &self.w2),
            ("b2", vec![self.d_high], &self.b2),
        ]
    }

    pub fn encode(&self, mel: &MelFrames) -> Result<FeatureSequence, TokenizerError> {
        if (mel.frame_rate() - self.mel_rate).abs() > 1e-9 * self.mel_rate {
            return Err(TokenizerError::RateMismatch { expected: self.mel_rate, found: mel.frame_rate() });
        }
        if mel.mel_bins() != self.mel_bins {
            return Err(TokenizerError::Dimension { what: "mel bins", expected: self.mel_bins, found: mel.mel_bins() });
        }
        let mel = mel.pad_to_multiple(TIME_STRIDE);
        let t = mel.num_frames();
        let x = normalize_mel(mel.values());
        let h = self.d_high;
        let mut hidden = matmul_nn(&x, &self.w1, t, self.mel_bins, h);
        for row in hidden.chunks_mut(h) {
            row.iter_mut().zip(&self.b1).for_each(|(v, b)| *v = (*v + b).tanh());
        }
        let mut out = matmul_nn(&hidden, &self.w2, t, h, h);
        for row in out.chunks_mut(h) {
            row.iter_mut().zip(&self.b2).for_each(|(v, b)| *v += b);
        }
        let frames = t / TIME_STRIDE;
        let mut pooled = vec![0.0; frames * h];
        for (i, row) in out.chunks(h).enumerate() {
            let dst = &mut pooled[(i / TIME_STRIDE) * h..(i / TIME_STRIDE + 1) * h];
            dst.iter_mut().zip(row).for_each(|(d, v)| *d += v / TIME_STRIDE as f64);
        }
        Ok(FeatureSequence::new(pooled, h, self.mel_rate / TIME_STRIDE as f64).expect("pooled shape"))
    }
}
