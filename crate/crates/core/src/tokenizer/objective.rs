//! Batch-level generator and discriminator objectives.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::discriminator::{disc_plans, discriminate_var};
use super::frontend::normalize_mel;
use super::generator::{bottleneck_var, decode_var, encode_var, GeneratorDims};
use super::losses::{self, MelScale};
use super::{LossWeights, TokenizerError, TokenizerModel};
use crate::config::AudioConfig;
use crate::dsp::{AudioBuffer, StftPlan};
use crate::grad::{Bound, GradError, Var};
use crate::real::Real;
use crate::rng::{stream, tag};
use crate::tensor::Tensor;

/// Analysis plans shared across steps.
pub struct Plans<T: Real> {
    pub mel: Vec<MelScale<T>>,
    pub disc: Vec<Arc<StftPlan<T>>>,
    pub head: Arc<StftPlan<T>>,
}

impl<T: Real> Plans<T> {
    pub fn new(audio: &AudioConfig, dims: &GeneratorDims, disc_windows: &[usize]) -> Result<Self, TokenizerError> {
        Ok(Self {
            mel: losses::mel_scales(audio.sample_rate),
            disc: disc_plans(disc_windows),
            head: Arc::new(StftPlan::new(dims.n_fft(), dims.head_hop)?),
        })
    }
}

/// One training crop with everything that stays constant during a step.
pub struct BatchItem<T: Real> {
    pub audio: Tensor<T>,
    /// Normalized log-mel `[T_mel, F]`, padded to the time stride.
    pub mel: Tensor<T>,
    pub z_s_high: Tensor<T>,
    pub z_s_low: Tensor<T>,
    pub mel_targets: Vec<Tensor<T>>,
    pub noise: Option<Tensor<T>>,
}

/// Computes the frozen semantic targets, mel targets and (when sampling)
/// reparameterization noise for one crop.
pub fn prepare_item<T: Real>(
    model: &TokenizerModel,
    crop: &AudioBuffer,
    plans: &Plans<T>,
    seed: u64,
    step: u64,
    index: u64,
) -> Result<BatchItem<T>, TokenizerError> {
    let mel = model.frontend.latent_mel(crop)?;
    let (z_s_high, z_s_low) = model.semantic(&mel)?;
    let audio: Vec<T> = crop.samples().iter().map(|&v| T::lit(v)).collect();
    let mel_targets = plans.mel.iter().map(|s| losses::log_mel_plain(s, &audio)).collect();
    let frames = z_s_low.num_frames();
    let noise = model.config.samples_noise().then(|| {
        let mut rng = stream(seed, &[tag::NOISE, step, index]);
        let n = frames * model.dims.d;
        let data = (0..n).map(|_| T::lit(StandardNormal.sample(&mut rng))).collect();
        Tensor::new(vec![frames, model.dims.d], data).expect("noise shape")
    });
    Ok(BatchItem {
        audio: Tensor::vector(audio),
        mel: Tensor::from_f64(&[mel.num_frames(), mel.mel_bins()], &normalize_mel(mel.values())).expect("mel shape"),
        z_s_high: z_s_high.to_tensor(),
        z_s_low: z_s_low.to_tensor(),
        mel_targets,
        noise,
    })
}

/// Batch-averaged terms of the generator objective.
pub struct ObjectiveTerms<'g, T: Real> {
    pub mel: Var<'g, T>,
    pub l_h: Var<'g, T>,
    pub l_l: Var<'g, T>,
    pub kl: Option<Var<'g, T>>,
    pub fm: Var<'g, T>,
    pub adv: Var<'g, T>,
    /// Reconstructions trimmed to the crop length.
    pub x_hats: Vec<Var<'g, T>>,
}

/// Plain values of every objective term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mel: f64,
    pub l_h: f64,
    pub l_l: f64,
    pub kl: f64,
    pub fm: f64,
    pub adv: f64,
    pub d_loss: f64,
    pub generator: f64,
}

impl LossBreakdown {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.mel * self.mel + w.sem * (self.l_h + self.l_l) + w.kl * self.kl + w.fm * self.fm + w.adv * self.adv
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("L_mel", self.mel),
            ("L_H", self.l_h),
            ("L_L", self.l_l),
            ("L_KL", self.kl),
            ("L_fm", self.fm),
            ("g_loss", self.adv),
            ("d_loss", self.d_loss),
            ("generator", self.generator),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

impl<T: Real> ObjectiveTerms<'_, T> {
    pub fn breakdown(&self, w: &LossWeights) -> LossBreakdown {
        let mut b = LossBreakdown {
            mel: self.mel.item().as_f64(),
            l_h: self.l_h.item().as_f64(),
            l_l: self.l_l.item().as_f64(),
            kl: self.kl.map_or(0.0, |v| v.item().as_f64()),
            fm: self.fm.item().as_f64(),
            adv: self.adv.item().as_f64(),
            ..LossBreakdown::default()
        };
        b.generator = b.weighted(w);
        b
    }
}

fn accumulate<'g, T: Real>(acc: &mut Option<Var<'g, T>>, v: Var<'g, T>) -> Result<(), GradError> {
    *acc = Some(match acc.take() {
        Some(a) => a.add(v)?,
        None => v,
    });
    Ok(())
}

fn averaged<'g, T: Real>(acc: Option<Var<'g, T>>, n: usize) -> Var<'g, T> {
    acc.expect("non-empty batch").scale(1.0 / n as f64)
}

/// Weighted generator objective. `disc` should be bound frozen so only the
/// generator receives gradients.
pub fn generator_objective_var<'g, T: Real>(
    gen: &Bound<'g, T>,
    disc: &Bound<'g, T>,
    dims: &GeneratorDims,
    weights: &LossWeights,
    items: &[BatchItem<T>],
    plans: &Plans<T>,
) -> Result<(Var<'g, T>, ObjectiveTerms<'g, T>), TokenizerError> {
    if items.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let g = gen.graph();
    let (mut mel, mut l_h, mut l_l, mut kl, mut fm, mut adv) = (None, None, None, None, None, None);
    let mut x_hats = Vec::with_capacity(items.len());
    for item in items {
        let (high, low) = encode_var(gen, dims, g.constant(item.mel.clone()))?;
        let (h, l) = losses::semantic_var(high, low, g.constant(item.z_s_high.clone()), g.constant(item.z_s_low.clone()))?;
        accumulate(&mut l_h, h)?;
        accumulate(&mut l_l, l)?;
        let z_uni = low.add(g.constant(item.z_s_low.clone()))?;
        let latent = bottleneck_var(gen, dims, z_uni, item.noise.as_ref())?;
        if let (Some(mu), Some(lv)) = (latent.mu, latent.logvar) {
            accumulate(&mut kl, losses::kl_var(mu, lv)?)?;
        }
        let x_hat = decode_var(gen, dims, latent.z, &plans.head)?.slice1d(0, item.audio.len())?;
        accumulate(&mut mel, losses::mel_multiscale_var(x_hat, &item.mel_targets, &plans.mel)?)?;
        let fake = discriminate_var(disc, x_hat, &plans.disc)?;
        let real = discriminate_var(disc, g.constant(item.audio.clone()), &plans.disc)?;
        accumulate(&mut adv, losses::hinge_g_var(&fake.logits)?)?;
        accumulate(&mut fm, losses::feature_matching_var(&real.features, &fake.features)?)?;
        x_hats.push(x_hat);
    }
    let n = items.len();
    let terms = ObjectiveTerms {
        mel: averaged(mel, n),
        l_h: averaged(l_h, n),
        l_l: averaged(l_l, n),
        kl: kl.map(|k| k.scale(1.0 / n as f64)),
        fm: averaged(fm, n),
        adv: averaged(adv, n),
        x_hats,
    };
    let mut total = terms
        .mel
        .scale(weights.mel)
        .add(terms.l_h.add(terms.l_l)?.scale(weights.sem))?
        .add(terms.fm.scale(weights.fm))?
        .add(terms.adv.scale(weights.adv))?;
    if let Some(k) = terms.kl {
        total = total.add(k.scale(weights.kl))?;
    }
    Ok((total, terms))
}

/// Batch-averaged hinge loss of the discriminator on real crops and detached
/// reconstructions.
pub fn discriminator_loss_var<'g, T: Real>(
    disc: &Bound<'g, T>,
    items: &[BatchItem<T>],
    x_hats: &[Tensor<T>],
    plans: &Plans<T>,
) -> Result<Var<'g, T>, TokenizerError> {
    if items.is_empty() || items.len() != x_hats.len() {
        return Err(TokenizerError::ShapeMismatch { lhs: vec![items.len()], rhs: vec![x_hats.len()] });
    }
    let g = disc.graph();
    let mut acc = None;
    for (item, x_hat) in items.iter().zip(x_hats) {
        let real = discriminate_var(disc, g.constant(item.audio.clone()), &plans.disc)?;
        let fake = discriminate_var(disc, g.constant(x_hat.clone()), &plans.disc)?;
        accumulate(&mut acc, losses::hinge_d_var(&real.logits, &fake.logits)?)?;
    }
    Ok(averaged(acc, items.len()))
}
