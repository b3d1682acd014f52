//! The tokenizer: frozen teacher and semantic bottleneck, patch-embed acoustic
//! encoder, unified latent with an optional Gaussian head, ISTFT decoder and a
//! multi-resolution STFT discriminator.

mod discriminator;
mod frontend;
mod generator;
pub mod losses;
mod objective;
mod teacher;
mod train;

use std::sync::Arc;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use discriminator::{disc_plans, discriminate_var, init_discriminator, DiscOutput, DISC_LAYERS};
pub use frontend::{normalize_mel, Frontend, TIME_STRIDE};
pub use generator::{bottleneck_var, decode_var, encode_var, init_generator, GeneratorDims, Latent, UPSAMPLE};
pub use objective::{
    discriminator_loss_var, generator_objective_var, prepare_item, BatchItem, LossBreakdown, ObjectiveTerms, Plans,
};
pub use teacher::{TeacherConfig, TeacherEncoder};
pub use train::{
    history_csv, load_tokenizer, train_tokenizer, TrainOptions, TrainRecord, TrainState, CHECKPOINT_KIND,
    HISTORY_HEADER,
};

use crate::checkpoint::CheckpointError;
use crate::config::AudioConfig;
use crate::dsp::{AudioBuffer, DspError, MelFrames, StftPlan};
use crate::features::FeatureSequence;
use crate::grad::{GradError, Graph, OptimizerSettings, ParamStore};
use crate::rng::{stream, tag};
use crate::sembo::{SemboError, SemboModel};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("frame rate {found} does not match expected {expected}")]
    RateMismatch { expected: f64, found: f64 },
    #[error("{what}: expected {expected}, found {found}")]
    Dimension { what: &'static str, expected: usize, found: usize },
    #[error("shapes differ: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("{term} became non-finite at step {step}")]
    NonFinite { step: u64, term: &'static str },
    #[error("checkpoint incompatible with configuration: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Sembo(#[from] SemboError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Weights of the generator objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    #[serde(rename = "lambda_mel")]
    pub mel: f64,
    #[serde(rename = "lambda_sem")]
    pub sem: f64,
    #[serde(rename = "lambda_kl")]
    pub kl: f64,
    #[serde(rename = "lambda_fm")]
    pub fm: f64,
    #[serde(rename = "lambda_adv")]
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mel: 45.0, sem: 45.0, kl: 1e-2, fm: 1.0, adv: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlMode {
    /// Reparameterized sampling during training, the mean at inference.
    Sample,
    /// The mean everywhere.
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// Gaussian head on the unified latent.
    Vae,
    /// The unified latent feeds the decoder directly.
    Autoencoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub d: usize,
    pub decoder_channels: usize,
    pub decoder_blocks: usize,
    pub decoder_kernel: usize,
    pub disc_windows: Vec<usize>,
    pub disc_channels: usize,
    #[serde(flatten)]
    pub weights: LossWeights,
    pub kl_mode: KlMode,
    pub steps: u64,
    pub batch: usize,
    pub crop_seconds: f64,
    /// Checkpoint interval in steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    pub optimizer: OptimizerSettings,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            d: 16,
            decoder_channels: 64,
            decoder_blocks: 4,
            decoder_kernel: 7,
            disc_windows: vec![256, 512, 1024],
            disc_channels: 8,
            weights: LossWeights::default(),
            kl_mode: KlMode::Sample,
            steps: 5000,
            batch: 2,
            crop_seconds: 1.0,
            checkpoint_every: 1000,
            optimizer: OptimizerSettings { base_lr: 1e-3, min_lr: 1e-5, ..OptimizerSettings::default() },
        }
    }
}

impl TokenizerConfig {
    /// The autoencoder topology applies exactly when the KL weight is zero and
    /// latents are deterministic.
    pub fn topology(&self) -> Topology {
        if self.weights.kl == 0.0 && self.kl_mode == KlMode::Deterministic {
            Topology::Autoencoder
        } else {
            Topology::Vae
        }
    }

    pub fn samples_noise(&self) -> bool {
        self.topology() == Topology::Vae && self.kl_mode == KlMode::Sample
    }
}

pub fn unify(z_a_low: &FeatureSequence, z_s_low: &FeatureSequence) -> Result<FeatureSequence, TokenizerError> {
    if (z_a_low.num_frames(), z_a_low.dim()) != (z_s_low.num_frames(), z_s_low.dim()) {
        return Err(TokenizerError::ShapeMismatch {
            lhs: vec![z_a_low.num_frames(), z_a_low.dim()],
            rhs: vec![z_s_low.num_frames(), z_s_low.dim()],
        });
    }
    let values = z_a_low.values().iter().zip(z_s_low.values()).map(|(a, b)| a + b).collect();
    Ok(FeatureSequence::new(values, z_a_low.dim(), z_a_low.frame_rate()).expect("same shape"))
}

/// All intermediate representations of one waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub z_a_high: FeatureSequence,
    pub z_a_low: FeatureSequence,
    pub z_s_high: FeatureSequence,
    pub z_s_low: FeatureSequence,
    pub z_uni: FeatureSequence,
    /// Decoder input at inference: `μ` with a Gaussian head, `z_uni` otherwise.
    pub latent: FeatureSequence,
}

#[derive(Debug, Clone)]
pub struct TokenizerModel {
    pub audio: AudioConfig,
    pub config: TokenizerConfig,
    pub dims: GeneratorDims,
    pub frontend: Frontend,
    pub teacher: TeacherEncoder,
    pub sembo: SemboModel,
    pub generator: ParamStore<f32>,
    pub discriminator: ParamStore<f32>,
}

impl TokenizerModel {
    pub fn new(
        audio: &AudioConfig,
        teacher: &TeacherConfig,
        sembo: SemboModel,
        config: &TokenizerConfig,
        seed: u64,
    ) -> Result<Self, TokenizerError> {
        if sembo.d_high != teacher.d_high {
            return Err(TokenizerError::Dimension { what: "semantic bottleneck input", expected: teacher.d_high, found: sembo.d_high });
        }
        if sembo.d_low != config.d {
            return Err(TokenizerError::Dimension { what: "semantic bottleneck width", expected: config.d, found: sembo.d_low });
        }
        let frontend = Frontend::new(audio)?;
        let dims = GeneratorDims {
            mel_bins: audio.mel_bins,
            d_high: teacher.d_high,
            d: config.d,
            channels: config.decoder_channels,
            blocks: config.decoder_blocks,
            kernel: config.decoder_kernel,
            head_hop: frontend.samples_per_latent() / UPSAMPLE,
            topology: config.topology(),
        };
        let mut rng = stream(seed, &[tag::INIT, 0x70]);
        let generator = init_generator(&dims, &mut rng);
        let discriminator = init_discriminator(config.disc_windows.len(), config.disc_channels, &mut rng);
        let teacher = TeacherEncoder::new(teacher, audio.mel_bins, frontend.mel_rate());
        Ok(Self { audio: audio.clone(), config: config.clone(), dims, frontend, teacher, sembo, generator, discriminator })
    }

    pub fn teacher_encode(&self, mel: &MelFrames) -> Result<FeatureSequence, TokenizerError> {
        self.teacher.encode(mel)
    }

    /// Frozen semantic path `(z_s_high, z_s_low)`.
    pub fn semantic(&self, mel: &MelFrames) -> Result<(FeatureSequence, FeatureSequence), TokenizerError> {
        let high = self.teacher.encode(mel)?;
        let low = self.sembo.compress(&high)?;
        Ok((high, low))
    }

    /// `(z_a_high, z_a_low)`; the mel is padded to a whole number of latent frames.
    pub fn acoustic_encode(&self, mel: &MelFrames) -> Result<(FeatureSequence, FeatureSequence), TokenizerError> {
        if mel.mel_bins() != self.dims.mel_bins {
            return Err(TokenizerError::Dimension { what: "mel bins", expected: self.dims.mel_bins, found: mel.mel_bins() });
        }
        let mel = mel.pad_to_multiple(TIME_STRIDE);
        let g = Graph::<f32>::new();
        let bound = self.generator.bind_frozen(&g);
        let x = Tensor::from_f64(&[mel.num_frames(), mel.mel_bins()], &normalize_mel(mel.values())).expect("mel shape");
        let (high, low) = encode_var(&bound, &self.dims, g.constant(x))?;
        let rate = self.frontend.latent_rate();
        Ok((FeatureSequence::from_tensor(&high.value(), rate), FeatureSequence::from_tensor(&low.value(), rate)))
    }

    /// Latent head on `z_uni`: returns the decoder input and the KL term.
    /// `rng` draws reparameterization noise; `None` selects the mean.
    pub fn kl_bottleneck(
        &self,
        z_uni: &FeatureSequence,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(FeatureSequence, f64), TokenizerError> {
        if z_uni.dim() != self.dims.d {
            return Err(TokenizerError::Dimension { what: "latent width", expected: self.dims.d, found: z_uni.dim() });
        }
        let g = Graph::<f64>::new();
        let params = self.generator.cast::<f64>();
        let bound = params.bind_frozen(&g);
        let noise = rng.map(|r| {
            let n = z_uni.num_frames() * z_uni.dim();
            let data = (0..n).map(|_| StandardNormal.sample(r)).collect();
            Tensor::new(vec![z_uni.num_frames(), z_uni.dim()], data).expect("noise shape")
        });
        let latent = bottleneck_var(&bound, &self.dims, g.constant(z_uni.to_tensor()), noise.as_ref())?;
        let kl = match (latent.mu, latent.logvar) {
            (Some(mu), Some(lv)) if z_uni.num_frames() > 0 => losses::kl_var(mu, lv)?.item(),
            _ => 0.0,
        };
        Ok((FeatureSequence::from_tensor(&latent.z.value(), z_uni.frame_rate()), kl))
    }

    pub fn decode(&self, z: &FeatureSequence) -> Result<AudioBuffer, TokenizerError> {
        if z.dim() != self.dims.d {
            return Err(TokenizerError::Dimension { what: "latent width", expected: self.dims.d, found: z.dim() });
        }
        if z.num_frames() == 0 {
            return Ok(AudioBuffer::silence(0, self.audio.sample_rate));
        }
        let head = Arc::new(StftPlan::<f32>::new(self.dims.n_fft(), self.dims.head_hop)?);
        let g = Graph::<f32>::new();
        let bound = self.generator.bind_frozen(&g);
        let y = decode_var(&bound, &self.dims, g.constant(z.to_tensor()), &head)?;
        let samples = y.value().data().iter().map(|&v| v as f64).collect();
        Ok(AudioBuffer::new(samples, self.audio.sample_rate)?)
    }

    pub fn encode_audio(&self, audio: &AudioBuffer) -> Result<Encoded, TokenizerError> {
        let mel = self.frontend.latent_mel(audio)?;
        let (z_s_high, z_s_low) = self.semantic(&mel)?;
        let (z_a_high, z_a_low) = self.acoustic_encode(&mel)?;
        let z_uni = unify(&z_a_low, &z_s_low)?;
        let latent = self.kl_bottleneck(&z_uni, None)?.0;
        Ok(Encoded { z_a_high, z_a_low, z_s_high, z_s_low, z_uni, latent })
    }

    /// Encode then decode, trimmed or padded to the input length.
    pub fn reconstruct(&self, audio: &AudioBuffer) -> Result<AudioBuffer, TokenizerError> {
        let enc = self.encode_audio(audio)?;
        Ok(self.decode(&enc.latent)?.fit_to(audio.len()))
    }

    /// Logit maps and feature maps per discriminator resolution.
    #[allow(clippy::type_complexity)]
    pub fn discriminate(&self, audio: &AudioBuffer) -> Result<(Vec<Tensor<f64>>, Vec<Vec<Tensor<f64>>>), TokenizerError> {
        let plans = disc_plans::<f64>(&self.config.disc_windows);
        let g = Graph::<f64>::new();
        let params = self.discriminator.cast::<f64>();
        let bound = params.bind_frozen(&g);
        let out = discriminate_var(&bound, g.constant(Tensor::vector(audio.samples().to_vec())), &plans)?;
        let logits = out.logits.iter().map(|v| v.value()).collect();
        let feats = out.features.iter().map(|fs| fs.iter().map(|v| v.value()).collect()).collect();
        Ok((logits, feats))
    }

    /// Generator and discriminator objectives on a batch of crops at 64-bit,
    /// without updating anything.
    pub fn total_objective(&self, crops: &[AudioBuffer], noise_seed: u64) -> Result<LossBreakdown, TokenizerError> {
        let plans = Plans::<f64>::new(&self.audio, &self.dims, &self.config.disc_windows)?;
        let items = crops
            .iter()
            .enumerate()
            .map(|(i, c)| prepare_item::<f64>(self, c, &plans, noise_seed, 0, i as u64))
            .collect::<Result<Vec<_>, _>>()?;
        let gen = self.generator.cast::<f64>();
        let disc = self.discriminator.cast::<f64>();
        let gd = Graph::new();
        let d_bound = disc.bind_frozen(&gd);
        let x_hats: Vec<Tensor<f64>> = {
            let g = Graph::new();
            let bound = gen.bind_frozen(&g);
            let db = disc.bind_frozen(&g);
            let (_, terms) = generator_objective_var(&bound, &db, &self.dims, &self.config.weights, &items, &plans)?;
            terms.x_hats.iter().map(|v| v.value()).collect()
        };
        let d_loss = discriminator_loss_var(&d_bound, &items, &x_hats, &plans)?.item();
        let g = Graph::new();
        let bound = gen.bind_frozen(&g);
        let db = disc.bind_frozen(&g);
        let (_, terms) = generator_objective_var(&bound, &db, &self.dims, &self.config.weights, &items, &plans)?;
        let mut breakdown = terms.breakdown(&self.config.weights);
        breakdown.d_loss = d_loss;
        Ok(breakdown)
    }
}

/// Dual-level semantic alignment `(L_H, L_L)` on plain sequences.
pub fn loss_semantic(
    z_a_high: &FeatureSequence,
    z_a_low: &FeatureSequence,
    z_s_high: &FeatureSequence,
    z_s_low: &FeatureSequence,
) -> Result<(f64, f64), TokenizerError> {
    for (a, s) in [(z_a_high, z_s_high), (z_a_low, z_s_low)] {
        if (a.num_frames(), a.dim()) != (s.num_frames(), s.dim()) {
            return Err(TokenizerError::ShapeMismatch { lhs: vec![a.num_frames(), a.dim()], rhs: vec![s.num_frames(), s.dim()] });
        }
    }
    let g = Graph::<f64>::new();
    let c = |z: &FeatureSequence| g.constant(z.to_tensor());
    let (h, l) = losses::semantic_var(c(z_a_high), c(z_a_low), c(z_s_high), c(z_s_low))?;
    Ok((h.item(), l.item()))
}

/// Closed-form KL of `N(μ, exp(logvar))` to `N(0, I)`, per-frame sum averaged over frames.
pub fn kl_divergence(mu: &FeatureSequence, logvar: &FeatureSequence) -> Result<f64, TokenizerError> {
    if (mu.num_frames(), mu.dim()) != (logvar.num_frames(), logvar.dim()) {
        return Err(TokenizerError::ShapeMismatch { lhs: vec![mu.num_frames(), mu.dim()], rhs: vec![logvar.num_frames(), logvar.dim()] });
    }
    let g = Graph::<f64>::new();
    let lv = g.constant(logvar.to_tensor()).clamp(losses::LOGVAR_RANGE.0, losses::LOGVAR_RANGE.1);
    // `+ 0.0` turns a -0 at the prior into 0
    Ok(losses::kl_var(g.constant(mu.to_tensor()), lv)?.item() + 0.0)
}

/// Multi-scale log-mel L1 distance; the shorter signal is zero-padded.
pub fn loss_mel_multiscale(x: &AudioBuffer, x_hat: &AudioBuffer) -> Result<f64, TokenizerError> {
    let n = x.len().max(x_hat.len());
    let scales = losses::mel_scales::<f64>(x.sample_rate());
    let (a, b) = (x.fit_to(n), x_hat.fit_to(n));
    let targets: Vec<_> = scales.iter().map(|s| losses::log_mel_plain(s, a.samples())).collect();
    let g = Graph::<f64>::new();
    Ok(losses::mel_multiscale_var(g.constant(Tensor::vector(b.samples().to_vec())), &targets, &scales)?.item())
}

/// Hinge `(d_loss, g_loss)` from per-resolution logit maps.
pub fn loss_adversarial(real: &[Tensor<f64>], fake: &[Tensor<f64>]) -> Result<(f64, f64), TokenizerError> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(TokenizerError::ShapeMismatch { lhs: vec![real.len()], rhs: vec![fake.len()] });
    }
    let g = Graph::<f64>::new();
    let r: Vec<_> = real.iter().map(|t| g.constant(t.clone())).collect();
    let f: Vec<_> = fake.iter().map(|t| g.constant(t.clone())).collect();
    Ok((losses::hinge_d_var(&r, &f)?.item(), losses::hinge_g_var(&f)?.item()))
}

pub fn loss_feature_matching(real: &[Vec<Tensor<f64>>], fake: &[Vec<Tensor<f64>>]) -> Result<f64, TokenizerError> {
    let congruent = real.len() == fake.len()
        && real.iter().zip(fake).all(|(r, f)| r.len() == f.len() && r.iter().zip(f).all(|(a, b)| a.shape() == b.shape()));
    if !congruent {
        return Err(TokenizerError::ShapeMismatch { lhs: vec![real.len()], rhs: vec![fake.len()] });
    }
    let g = Graph::<f64>::new();
    let wrap = |xs: &[Vec<Tensor<f64>>]| -> Vec<Vec<_>> { xs.iter().map(|l| l.iter().map(|t| g.constant(t.clone())).collect()).collect() };
    Ok(losses::feature_matching_var(&wrap(real), &wrap(fake))?.item())
}

#[cfg(test)]
mod tests;
