//! Loss terms of the tokenizer objective, on the tape.

use std::sync::Arc;

use crate::dsp::LOG_FLOOR;
use crate::dsp::{MelFilterbank, StftPlan};
use crate::grad::{GradError, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Window sizes of the multi-scale mel loss; mel bins are `window / 32 * 5`.
pub const MEL_LOSS_WINDOWS: [usize; 7] = [32, 64, 128, 256, 512, 1024, 2048];
/// Clamp range applied to log-variance.
pub const LOGVAR_RANGE: (f64, f64) = (-14.0, 14.0);
/// Stabilizer in the feature-matching normalization.
pub const FM_EPS: f64 = 1e-8;

pub fn mel_loss_bins(window: usize) -> usize {
    window / 32 * 5
}

/// One analysis scale of the mel loss.
pub struct MelScale<T: Real> {
    pub plan: Arc<StftPlan<T>>,
    pub bank: Arc<MelFilterbank>,
}

pub fn mel_scales<T: Real>(sample_rate: u32) -> Vec<MelScale<T>> {
    MEL_LOSS_WINDOWS
        .iter()
        .map(|&w| MelScale {
            plan: Arc::new(StftPlan::new(w, w / 4).expect("valid mel loss window")),
            bank: Arc::new(MelFilterbank::new(sample_rate, w, mel_loss_bins(w)).expect("valid mel loss bank")),
        })
        .collect()
}

/// `ln(mel(|STFT x|²) + LOG_FLOOR)` outside the tape.
pub fn log_mel_plain<T: Real>(scale: &MelScale<T>, x: &[T]) -> Tensor<T> {
    let (power, _) = scale.plan.power(x);
    let frames = scale.plan.num_frames(x.len());
    let floor = T::lit(LOG_FLOOR);
    let values = scale.bank.project(&power).into_iter().map(|e| (e + floor).ln()).collect();
    Tensor::matrix(frames, scale.bank.n_mels(), values).expect("mel shape")
}

/// Mean over scales of the mean absolute log-mel difference. `target` holds
/// the precomputed log-mel of the reference signal per scale.
pub fn mel_multiscale_var<'g, T: Real>(
    x_hat: Var<'g, T>,
    target: &[Tensor<T>],
    scales: &[MelScale<T>],
) -> Result<Var<'g, T>, GradError> {
    let g = x_hat.graph();
    let mut acc: Option<Var<'g, T>> = None;
    for (scale, t) in scales.iter().zip(target) {
        let m = x_hat.stft_power(&scale.plan)?.mel_project(&scale.bank)?.add_scalar(LOG_FLOOR).log();
        let term = m.sub(g.constant(t.clone()))?.abs().mean();
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one scale").scale(1.0 / scales.len() as f64))
}

/// `‖a − sg(b)‖_F / sqrt(numel)`.
pub fn mean_scaled_distance<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>, GradError> {
    let n = a.value().len().max(1) as f64;
    Ok(a.sub(b.stop_gradient())?.norm_all().scale(1.0 / n.sqrt()))
}

/// Dual-level semantic alignment `(L_H, L_L)`.
pub fn semantic_var<'g, T: Real>(
    z_a_high: Var<'g, T>,
    z_a_low: Var<'g, T>,
    z_s_high: Var<'g, T>,
    z_s_low: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>), GradError> {
    Ok((mean_scaled_distance(z_a_high, z_s_high)?, mean_scaled_distance(z_a_low, z_s_low)?))
}

/// Closed-form KL to the standard normal, summed over dims and averaged over frames.
pub fn kl_var<'g, T: Real>(mu: Var<'g, T>, logvar: Var<'g, T>) -> Result<Var<'g, T>, GradError> {
    let frames = mu.shape().first().copied().unwrap_or(1).max(1) as f64;
    let inner = logvar.add_scalar(1.0).sub(mu.square())?.sub(logvar.exp())?;
    Ok(inner.sum().scale(-0.5 / frames))
}

/// Hinge discriminator loss averaged over resolutions.
pub fn hinge_d_var<'g, T: Real>(real: &[Var<'g, T>], fake: &[Var<'g, T>]) -> Result<Var<'g, T>, GradError> {
    let mut acc: Option<Var<'g, T>> = None;
    for (r, f) in real.iter().zip(fake) {
        let term = r.scale(-1.0).add_scalar(1.0).relu().mean().add(f.add_scalar(1.0).relu().mean())?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one resolution").scale(1.0 / real.len() as f64))
}

/// Generator adversarial loss `−mean D(x̂)` averaged over resolutions.
pub fn hinge_g_var<'g, T: Real>(fake: &[Var<'g, T>]) -> Result<Var<'g, T>, GradError> {
    let mut acc: Option<Var<'g, T>> = None;
    for f in fake {
        let term = f.mean();
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one resolution").scale(-1.0 / fake.len() as f64))
}

/// Mean over resolutions and layers of `mean|r − f| / (mean|r| + ε)`; the real
/// side is treated as a constant.
pub fn feature_matching_var<'g, T: Real>(real: &[Vec<Var<'g, T>>], fake: &[Vec<Var<'g, T>>]) -> Result<Var<'g, T>, GradError> {
    if real.len() != fake.len() || real.iter().zip(fake).any(|(r, f)| r.len() != f.len()) {
        return Err(GradError::shape("feature_matching", &[real.len()], &[fake.len()]));
    }
    let mut acc: Option<Var<'g, T>> = None;
    let mut count = 0usize;
    for (rs, fs) in real.iter().zip(fake) {
        for (r, f) in rs.iter().zip(fs) {
            let rv = r.value();
            let mean_abs = rv.data().iter().map(|v| v.abs().as_f64()).sum::<f64>() / rv.len().max(1) as f64;
            let term = f.sub(r.stop_gradient())?.abs().mean().scale(1.0 / (mean_abs + FM_EPS));
            acc = Some(match acc {
                Some(a) => a.add(term)?,
                None => term,
            });
            count += 1;
        }
    }
    match acc {
        Some(a) => Ok(a.scale(1.0 / count as f64)),
        None => Err(GradError::shape("feature_matching", &[0], &[0])),
    }
}
