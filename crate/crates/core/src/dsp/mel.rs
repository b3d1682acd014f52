use super::stft::StftPlan;
use super::{AudioBuffer, DspError};
use crate::real::Real;

/// Floor added before the logarithm so silence maps to `ln(1e-5)`.
pub const LOG_FLOOR: f64 = 1e-5;

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters spaced evenly on the mel scale from 0 Hz to Nyquist.
///
/// Stored sparsely per FFT bin since each bin touches at most two filters.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    centers_hz: Vec<f64>,
    /// For each FFT bin, the `(filter, weight)` pairs with nonzero weight.
    per_bin: Vec<Vec<(usize, f64)>>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, window_size: usize, n_mels: usize) -> Result<Self, DspError> {
        if n_mels == 0 {
            return Err(DspError::InvalidMelBins);
        }
        let n_bins = window_size / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
        let mut per_bin = vec![Vec::new(); n_bins];
        for (k, slot) in per_bin.iter_mut().enumerate() {
            let f = k as f64 * sample_rate as f64 / window_size as f64;
            for m in 0..n_mels {
                let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let w = ((f - lo) / (c - lo)).min((hi - f) / (hi - c));
                if w > 0.0 {
                    slot.push((m, w));
                }
            }
        }
        Ok(Self { n_mels, n_bins, centers_hz: edges[1..=n_mels].to_vec(), per_bin })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn per_bin(&self) -> &[Vec<(usize, f64)>] {
        &self.per_bin
    }

    /// Dense `n_mels × n_bins` matrix.
    pub fn dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_mels * self.n_bins];
        for (k, taps) in self.per_bin.iter().enumerate() {
            for &(m, w) in taps {
                out[m * self.n_bins + k] = w;
            }
        }
        out
    }

    /// Projects `frames × bins` power onto `frames × n_mels`.
    pub fn project<T: Real>(&self, power: &[T]) -> Vec<T> {
        let frames = power.len() / self.n_bins;
        let mut out = vec![T::zero(); frames * self.n_mels];
        for f in 0..frames {
            let src = &power[f * self.n_bins..(f + 1) * self.n_bins];
            let dst = &mut out[f * self.n_mels..(f + 1) * self.n_mels];
            for (k, taps) in self.per_bin.iter().enumerate() {
                for &(m, w) in taps {
                    dst[m] = dst[m] + src[k] * T::lit(w);
                }
            }
        }
        out
    }

    /// Adjoint of [`Self::project`].
    pub fn project_backward<T: Real>(&self, grad: &[T]) -> Vec<T> {
        let frames = grad.len() / self.n_mels;
        let mut out = vec![T::zero(); frames * self.n_bins];
        for f in 0..frames {
            let g = &grad[f * self.n_mels..(f + 1) * self.n_mels];
            let dst = &mut out[f * self.n_bins..(f + 1) * self.n_bins];
            for (k, taps) in self.per_bin.iter().enumerate() {
                dst[k] = taps.iter().fold(T::zero(), |acc, &(m, w)| acc + g[m] * T::lit(w));
            }
        }
        out
    }
}

/// Log-mel spectrogram, `frames × mel_bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFrames {
    values: Vec<f64>,
    num_frames: usize,
    mel_bins: usize,
    frame_rate: f64,
}

impl MelFrames {
    pub fn new(values: Vec<f64>, mel_bins: usize, frame_rate: f64) -> Self {
        assert!(mel_bins > 0 && values.len() % mel_bins == 0);
        Self { num_frames: values.len() / mel_bins, values, mel_bins, frame_rate }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn mel_bins(&self) -> usize {
        self.mel_bins
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.mel_bins..(t + 1) * self.mel_bins]
    }

    /// Pads with silence frames (`ln LOG_FLOOR`) up to a multiple of `k` frames.
    pub fn pad_to_multiple(&self, k: usize) -> Self {
        let target = self.num_frames.div_ceil(k).max(1) * k;
        let mut values = self.values.clone();
        values.resize(target * self.mel_bins, LOG_FLOOR.ln());
        Self { values, num_frames: target, mel_bins: self.mel_bins, frame_rate: self.frame_rate }
    }
}

/// `ln(filterbank · |STFT|² + LOG_FLOOR)` with `len / hop + 1` frames.
pub fn mel_spectrogram(
    audio: &AudioBuffer,
    window_size: usize,
    hop: usize,
    mel_bins: usize,
) -> Result<MelFrames, DspError> {
    if !window_size.is_power_of_two() {
        return Err(DspError::WindowNotPowerOfTwo(window_size));
    }
    let plan = StftPlan::<f64>::new(window_size, hop)?;
    let bank = MelFilterbank::new(audio.sample_rate(), window_size, mel_bins)?;
    Ok(log_mel_with(&plan, &bank, audio))
}

pub(crate) fn log_mel_with(plan: &StftPlan<f64>, bank: &MelFilterbank, audio: &AudioBuffer) -> MelFrames {
    let (power, _) = plan.power(audio.samples());
    let values = bank.project(&power).into_iter().map(|e| (e + LOG_FLOOR).ln()).collect();
    MelFrames::new(values, bank.n_mels(), audio.sample_rate() as f64 / plan.hop() as f64)
}
