//! Acoustic encoder, latent bottleneck and waveform decoder on the tape.

use std::sync::Arc;

use rand::Rng;

use super::frontend::TIME_STRIDE;
use super::losses::LOGVAR_RANGE;
use super::Topology;
use crate::dsp::StftPlan;
use crate::grad::{Bound, GradError, ParamStore, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Decoder frames per latent frame.
pub const UPSAMPLE: usize = 2;
const INPUT_KERNEL: usize = 3;
const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorDims {
    pub mel_bins: usize,
    pub d_high: usize,
    pub d: usize,
    pub channels: usize,
    pub blocks: usize,
    pub kernel: usize,
    /// Decoder hop in samples; the ISTFT size is four times this.
    pub head_hop: usize,
    pub topology: Topology,
}

impl GeneratorDims {
    pub fn n_fft(&self) -> usize {
        4 * self.head_hop
    }

    pub fn bins(&self) -> usize {
        self.n_fft() / 2 + 1
    }

    pub fn samples_per_latent(&self) -> usize {
        UPSAMPLE * self.head_hop
    }
}

pub(crate) fn insert_conv(store: &mut ParamStore<f32>, name: &str, shape: &[usize], rng: &mut impl Rng) {
    let fan_in: usize = shape[1..].iter().product();
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    store.insert_uniform(&format!("{name}.w"), shape, bound, rng);
    store.insert_uniform(&format!("{name}.b"), &[shape[0]], bound, rng);
}

pub fn init_generator(dims: &GeneratorDims, rng: &mut impl Rng) -> ParamStore<f32> {
    let mut p = ParamStore::new();
    insert_conv(&mut p, "encoder.patch", &[dims.d_high, 1, TIME_STRIDE, dims.mel_bins], rng);
    p.insert_linear("encoder.fc", dims.d_high, dims.d, rng);
    if dims.topology == Topology::Vae {
        p.insert_linear("kl.mu", dims.d, dims.d, rng);
        p.insert_linear("kl.logvar", dims.d, dims.d, rng);
    }
    let c = dims.channels;
    insert_conv(&mut p, "decoder.input", &[c, dims.d, INPUT_KERNEL], rng);
    for i in 0..dims.blocks {
        let bound = 1.0 / (dims.kernel as f64).sqrt();
        p.insert_uniform(&format!("decoder.block{i}.dw.w"), &[c, dims.kernel], bound, rng);
        p.insert_uniform(&format!("decoder.block{i}.dw.b"), &[c], bound, rng);
        p.insert_linear(&format!("decoder.block{i}.pw1"), c, 3 * c, rng);
        p.insert_linear(&format!("decoder.block{i}.pw2"), 3 * c, c, rng);
        p.insert(format!("decoder.block{i}.gamma"), Tensor::full(&[c], 1.0 / dims.blocks as f32));
    }
    p.insert_linear("decoder.head", c, 2 * dims.bins(), rng);
    p
}

/// `(z_a_high [T, D_high], z_a_low [T, d])` from normalized log-mel `[T_mel, F]`
/// with `T_mel` divisible by the time stride.
pub fn encode_var<'g, T: Real>(
    bound: &Bound<'g, T>,
    dims: &GeneratorDims,
    mel: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>), GradError> {
    let shape = mel.shape();
    if shape.len() != 2 || shape[1] != dims.mel_bins || shape[0] % TIME_STRIDE != 0 {
        return Err(GradError::shape("acoustic_encode", &shape, &[TIME_STRIDE, dims.mel_bins]));
    }
    let frames = shape[0] / TIME_STRIDE;
    let image = mel.reshape(&[1, shape[0], shape[1]])?;
    let patches = image.conv2d(
        bound.var("encoder.patch.w")?,
        Some(bound.var("encoder.patch.b")?),
        (TIME_STRIDE, dims.mel_bins),
        (0, 0),
    )?;
    let high = patches.reshape(&[dims.d_high, frames])?.transpose()?;
    let low = bound.linear("encoder.fc", high)?;
    Ok((high, low))
}

/// Gaussian head outputs and the decoder input.
pub struct Latent<'g, T: Real> {
    pub mu: Option<Var<'g, T>>,
    pub logvar: Option<Var<'g, T>>,
    pub z: Var<'g, T>,
}

/// Applies the latent head to `z_uni`. With `noise` the sample is
/// `μ + exp(logvar/2)·noise`, otherwise `μ`.
pub fn bottleneck_var<'g, T: Real>(
    bound: &Bound<'g, T>,
    dims: &GeneratorDims,
    z_uni: Var<'g, T>,
    noise: Option<&Tensor<T>>,
) -> Result<Latent<'g, T>, GradError> {
    if dims.topology == Topology::Autoencoder {
        return Ok(Latent { mu: None, logvar: None, z: z_uni });
    }
    let mu = bound.linear("kl.mu", z_uni)?;
    let logvar = bound.linear("kl.logvar", z_uni)?.clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1);
    let z = match noise {
        Some(eta) => mu.add(logvar.scale(0.5).exp().mul(z_uni.graph().constant(eta.clone()))?)?,
        None => mu,
    };
    Ok(Latent { mu: Some(mu), logvar: Some(logvar), z })
}

/// Waveform of `T · samples_per_latent` samples from latents `[T, d]`.
pub fn decode_var<'g, T: Real>(
    bound: &Bound<'g, T>,
    dims: &GeneratorDims,
    z: Var<'g, T>,
    head: &Arc<StftPlan<T>>,
) -> Result<Var<'g, T>, GradError> {
    let shape = z.shape();
    if shape.len() != 2 || shape[1] != dims.d {
        return Err(GradError::shape("decode", &shape, &[0, dims.d]));
    }
    let frames = shape[0] * UPSAMPLE;
    let mut h = z
        .repeat_rows(UPSAMPLE)?
        .conv1d(bound.var("decoder.input.w")?, Some(bound.var("decoder.input.b")?))?;
    for i in 0..dims.blocks {
        let p = |s: &str| format!("decoder.block{i}.{s}");
        let r = h.depthwise_conv1d(bound.var(&p("dw.w"))?, Some(bound.var(&p("dw.b"))?))?.layer_norm(LN_EPS)?;
        let r = bound.linear(&p("pw1"), r)?.gelu();
        let r = bound.linear(&p("pw2"), r)?.mul_row(bound.var(&p("gamma"))?)?;
        h = h.add(r)?;
    }
    let out = bound.linear("decoder.head", h.layer_norm(LN_EPS)?)?;
    let bins = dims.bins();
    let mag = out.slice_cols(0, bins)?.clamp(f64::NEG_INFINITY, 100f64.ln()).exp();
    let phase = out.slice_cols(bins, 2 * bins)?;
    let re = mag.mul(phase.cos())?;
    let im = mag.mul(phase.sin())?;
    z.graph().istft(re, im, head, frames * dims.head_hop)
}
