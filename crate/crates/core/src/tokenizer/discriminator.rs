//! Multi-resolution STFT discriminator.

use std::sync::Arc;

use rand::Rng;

use super::generator::insert_conv;
use crate::dsp::StftPlan;
use crate::grad::{Bound, GradError, ParamStore, Var};
use crate::real::Real;

/// Intermediate feature maps per resolution.
pub const DISC_LAYERS: usize = 4;
/// `(time, frequency)` strides of the feature convolutions.
pub const DISC_STRIDES: [(usize, usize); DISC_LAYERS] = [(1, 2), (2, 2), (1, 2), (2, 2)];
pub const DISC_SLOPE: f64 = 0.1;
const SPEC_FLOOR: f64 = 1e-5;
const SPEC_SCALE: f64 = 0.1;

pub fn disc_plans<T: Real>(windows: &[usize]) -> Vec<Arc<StftPlan<T>>> {
    windows.iter().map(|&w| Arc::new(StftPlan::new(w, w / 4).expect("valid discriminator window"))).collect()
}

pub fn init_discriminator(resolutions: usize, channels: usize, rng: &mut impl Rng) -> ParamStore<f32> {
    let mut p = ParamStore::new();
    for r in 0..resolutions {
        let mut cin = 1;
        for l in 0..DISC_LAYERS {
            insert_conv(&mut p, &format!("res{r}.conv{l}"), &[channels, cin, 3, 3], rng);
            cin = channels;
        }
        insert_conv(&mut p, &format!("res{r}.post"), &[1, channels, 3, 3], rng);
    }
    p
}

pub struct DiscOutput<'g, T: Real> {
    /// One logit map per resolution.
    pub logits: Vec<Var<'g, T>>,
    /// `DISC_LAYERS` activations per resolution.
    pub features: Vec<Vec<Var<'g, T>>>,
}

/// Runs every resolution on a waveform vector.
pub fn discriminate_var<'g, T: Real>(
    bound: &Bound<'g, T>,
    x: Var<'g, T>,
    plans: &[Arc<StftPlan<T>>],
) -> Result<DiscOutput<'g, T>, GradError> {
    let mut logits = Vec::with_capacity(plans.len());
    let mut features = Vec::with_capacity(plans.len());
    for (r, plan) in plans.iter().enumerate() {
        let power = x.stft_power(plan)?;
        let shape = power.shape();
        let mut h = power.add_scalar(SPEC_FLOOR).log().scale(SPEC_SCALE).reshape(&[1, shape[0], shape[1]])?;
        let mut feats = Vec::with_capacity(DISC_LAYERS);
        for (l, &stride) in DISC_STRIDES.iter().enumerate() {
            let w = bound.var(&format!("res{r}.conv{l}.w"))?;
            let b = bound.var(&format!("res{r}.conv{l}.b"))?;
            h = h.conv2d(w, Some(b), stride, (1, 1))?.leaky_relu(DISC_SLOPE);
            feats.push(h);
        }
        let w = bound.var(&format!("res{r}.post.w"))?;
        let b = bound.var(&format!("res{r}.post.b"))?;
        logits.push(h.conv2d(w, Some(b), (1, 1), (1, 1))?);
        features.push(feats);
    }
    Ok(DiscOutput { logits, features })
}
