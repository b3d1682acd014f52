use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{AudioBuffer, DspError};
use crate::real::Real;

/// Periodic Hann window of length `n`.
pub fn hann_window<T: Real>(n: usize) -> Vec<T> {
    (0..n)
        .map(|j| {
            let phase = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
            T::lit(0.5 * (1.0 - phase.cos()))
        })
        .collect()
}

/// Mirror index into a signal of length `n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> Option<usize> {
    match n {
        0 => None,
        1 => Some(0),
        _ => {
            let period = 2 * (n as isize - 1);
            let m = i.rem_euclid(period);
            Some(if m >= n as isize { (period - m) as usize } else { m as usize })
        }
    }
}

/// Precomputed framing and FFT plans for one `(window, hop)` pair.
///
/// Framing is centered: the signal is reflection-padded by `window / 2` on
/// both sides, giving `len / hop + 1` frames.
#[derive(Clone)]
pub struct StftPlan<T: Real> {
    window_size: usize,
    hop: usize,
    window: Vec<T>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Real> fmt::Debug for StftPlan<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StftPlan").field("window_size", &self.window_size).field("hop", &self.hop).finish()
    }
}

impl<T: Real> StftPlan<T> {
    /// Plan with a Hann window. The window size must be even.
    pub fn new(window_size: usize, hop: usize) -> Result<Self, DspError> {
        if window_size < 2 || window_size % 2 != 0 {
            return Err(DspError::InvalidWindow(window_size));
        }
        if hop == 0 || hop > window_size {
            return Err(DspError::InvalidHop { hop, window: window_size });
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            window_size,
            hop,
            window: hann_window(window_size),
            forward: planner.plan_fft_forward(window_size),
            inverse: planner.plan_fft_inverse(window_size),
        })
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[T] {
        &self.window
    }

    pub fn bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    pub fn num_frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// True when the squared-window overlap-add envelope is constant, which
    /// is what windowed synthesis needs for exact inversion.
    pub fn is_cola(&self) -> bool {
        let n = self.window_size;
        let env: Vec<f64> = (0..self.hop)
            .map(|r| (r..n).step_by(self.hop).map(|j| self.window[j].as_f64().powi(2)).sum())
            .collect();
        let max = env.iter().cloned().fold(0.0, f64::max);
        max > 0.0 && env.iter().all(|&e| (e - max).abs() <= 1e-10 * max)
    }

    fn fill_frames(&self, x: &[T]) -> Vec<Complex<T>> {
        let n = self.window_size;
        let pad = (n / 2) as isize;
        let frames = self.num_frames(x.len());
        let mut buf = vec![Complex::new(T::zero(), T::zero()); frames * n];
        for m in 0..frames {
            let start = (m * self.hop) as isize - pad;
            let row = &mut buf[m * n..(m + 1) * n];
            for (j, slot) in row.iter_mut().enumerate() {
                if let Some(idx) = reflect(start + j as isize, x.len()) {
                    slot.re = x[idx] * self.window[j];
                }
            }
        }
        buf
    }

    /// One-sided spectra, `frames × bins` row-major.
    pub fn analyze(&self, x: &[T]) -> Vec<Complex<T>> {
        let n = self.window_size;
        let bins = self.bins();
        let mut buf = self.fill_frames(x);
        if !buf.is_empty() {
            self.forward.process(&mut buf);
        }
        buf.chunks(n).flat_map(|frame| frame[..bins].iter().copied()).collect()
    }

    /// Power spectrum `|X|²` together with the complex spectra it came from.
    pub fn power(&self, x: &[T]) -> (Vec<T>, Vec<Complex<T>>) {
        let spec = self.analyze(x);
        let power = spec.iter().map(|c| c.norm_sqr()).collect();
        (power, spec)
    }

    /// Gradient of `Σ g·|X|²` with respect to the input signal of length `len`.
    pub fn power_backward(&self, spec: &[Complex<T>], grad_power: &[T], len: usize) -> Vec<T> {
        let n = self.window_size;
        let bins = self.bins();
        let frames = spec.len() / bins;
        let mut buf = vec![Complex::new(T::zero(), T::zero()); frames * n];
        for m in 0..frames {
            for k in 0..bins {
                let idx = m * bins + k;
                buf[m * n + k] = spec[idx] * grad_power[idx];
            }
        }
        if !buf.is_empty() {
            self.inverse.process(&mut buf);
        }
        let two = T::lit(2.0);
        let pad = (n / 2) as isize;
        let mut grad = vec![T::zero(); len];
        for m in 0..frames {
            let start = (m * self.hop) as isize - pad;
            for j in 0..n {
                if let Some(idx) = reflect(start + j as isize, len) {
                    grad[idx] = grad[idx] + two * buf[m * n + j].re * self.window[j];
                }
            }
        }
        grad
    }

    fn envelope(&self, frames: usize) -> Vec<T> {
        let n = self.window_size;
        let total = if frames == 0 { 0 } else { (frames - 1) * self.hop + n };
        let mut env = vec![T::zero(); total];
        for m in 0..frames {
            for j in 0..n {
                let p = m * self.hop + j;
                env[p] = env[p] + self.window[j] * self.window[j];
            }
        }
        env
    }

    fn env_floor(env: &[T]) -> T {
        let max = env.iter().cloned().fold(T::zero(), T::max);
        max * T::lit(1e-11)
    }

    /// Windowed overlap-add synthesis from one-sided spectra, normalized by
    /// the squared-window envelope and trimmed by `window / 2` at the front.
    ///
    /// Imaginary parts of the DC and Nyquist bins are ignored.
    pub fn synthesize(&self, re: &[T], im: &[T], out_len: usize) -> Vec<T> {
        let n = self.window_size;
        let bins = self.bins();
        let frames = re.len() / bins;
        let inv_n = T::one() / T::lit(n as f64);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); frames * n];
        for m in 0..frames {
            let row = &mut buf[m * n..(m + 1) * n];
            let base = m * bins;
            row[0] = Complex::new(re[base], T::zero());
            row[n / 2] = Complex::new(re[base + n / 2], T::zero());
            for k in 1..n / 2 {
                let c = Complex::new(re[base + k], im[base + k]);
                row[k] = c;
                row[n - k] = c.conj();
            }
        }
        if !buf.is_empty() {
            self.inverse.process(&mut buf);
        }
        let env = self.envelope(frames);
        let mut acc = vec![T::zero(); env.len()];
        for m in 0..frames {
            for j in 0..n {
                let p = m * self.hop + j;
                acc[p] = acc[p] + buf[m * n + j].re * inv_n * self.window[j];
            }
        }
        let floor = Self::env_floor(&env);
        let pad = n / 2;
        (0..out_len)
            .map(|i| match env.get(i + pad) {
                Some(&e) if e > floor => acc[i + pad] / e,
                _ => T::zero(),
            })
            .collect()
    }

    /// Adjoint of [`Self::synthesize`]: maps an output gradient to gradients
    /// on the real and imaginary spectrum parts.
    pub fn synthesize_backward(&self, grad_out: &[T], frames: usize) -> (Vec<T>, Vec<T>) {
        let n = self.window_size;
        let bins = self.bins();
        let pad = n / 2;
        let env = self.envelope(frames);
        let floor = Self::env_floor(&env);
        let mut g_acc = vec![T::zero(); env.len()];
        for (i, &g) in grad_out.iter().enumerate() {
            if let Some(&e) = env.get(i + pad) {
                if e > floor {
                    g_acc[i + pad] = g / e;
                }
            }
        }
        let mut buf = vec![Complex::new(T::zero(), T::zero()); frames * n];
        for m in 0..frames {
            for j in 0..n {
                buf[m * n + j].re = g_acc[m * self.hop + j] * self.window[j];
            }
        }
        if !buf.is_empty() {
            self.forward.process(&mut buf);
        }
        let inv_n = T::one() / T::lit(n as f64);
        let two_inv_n = inv_n + inv_n;
        let mut g_re = vec![T::zero(); frames * bins];
        let mut g_im = vec![T::zero(); frames * bins];
        for m in 0..frames {
            for k in 0..bins {
                let c = buf[m * n + k];
                let idx = m * bins + k;
                if k == 0 || k == n / 2 {
                    g_re[idx] = c.re * inv_n;
                } else {
                    g_re[idx] = c.re * two_inv_n;
                    g_im[idx] = c.im * two_inv_n;
                }
            }
        }
        (g_re, g_im)
    }
}

/// Complex STFT of an audio buffer.
#[derive(Debug, Clone)]
pub struct StftFrames {
    plan: StftPlan<f64>,
    bins: Vec<Complex<f64>>,
    num_frames: usize,
    signal_len: usize,
    sample_rate: u32,
}

impl StftFrames {
    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_bins(&self) -> usize {
        self.plan.bins()
    }

    pub fn window_size(&self) -> usize {
        self.plan.window_size()
    }

    pub fn hop(&self) -> usize {
        self.plan.hop()
    }

    pub fn window(&self) -> &[f64] {
        self.plan.window()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// All bins, `frames × bins` row-major.
    pub fn bins(&self) -> &[Complex<f64>] {
        &self.bins
    }

    pub fn bins_mut(&mut self) -> &mut [Complex<f64>] {
        &mut self.bins
    }

    pub fn frame(&self, m: usize) -> &[Complex<f64>] {
        let b = self.num_bins();
        &self.bins[m * b..(m + 1) * b]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.norm()).collect()
    }
}

/// Hann-windowed, center-padded STFT. `window_size` must be a power of two.
pub fn stft(audio: &AudioBuffer, window_size: usize, hop: usize) -> Result<StftFrames, DspError> {
    if !window_size.is_power_of_two() {
        return Err(DspError::WindowNotPowerOfTwo(window_size));
    }
    let plan = StftPlan::new(window_size, hop)?;
    let bins = plan.analyze(audio.samples());
    Ok(StftFrames {
        num_frames: plan.num_frames(audio.len()),
        signal_len: audio.len(),
        sample_rate: audio.sample_rate(),
        plan,
        bins,
    })
}

/// Inverse of [`stft`], returning a signal of the original length.
pub fn istft(frames: &StftFrames) -> Result<AudioBuffer, DspError> {
    if !frames.plan.is_cola() {
        return Err(DspError::NotCola { window: frames.window_size(), hop: frames.hop() });
    }
    let re: Vec<f64> = frames.bins.iter().map(|c| c.re).collect();
    let im: Vec<f64> = frames.bins.iter().map(|c| c.im).collect();
    let out = frames.plan.synthesize(&re, &im, frames.signal_len);
    AudioBuffer::new(out, frames.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), 16_000).unwrap()
    }

    fn interior_error(a: &[f64], b: &[f64], edge: usize) -> f64 {
        a[edge..a.len() - edge].iter().zip(&b[edge..b.len() - edge]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn zeros_in_zeros_out() {
        let a = AudioBuffer::silence(1000, 16_000);
        let s = stft(&a, 256, 64).unwrap();
        assert!(s.bins().iter().all(|c| c.norm() == 0.0));
        assert_eq!(s.num_frames(), 1000 / 64 + 1);
        assert_eq!(s.num_bins(), 129);
        let back = istft(&s).unwrap();
        assert!(back.samples().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bin_centered_sine_peaks_at_its_bin() {
        let n = 512;
        let k = 37;
        let freq = k as f64 * 16_000.0 / n as f64;
        let x = (0..8000).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin()).collect();
        let s = stft(&AudioBuffer::new(x, 16_000).unwrap(), n, 128).unwrap();
        let row = s.frame(20);
        let peak = (0..row.len()).max_by(|&i, &j| row[i].norm().total_cmp(&row[j].norm())).unwrap();
        assert_eq!(peak, k);
    }

    #[test]
    fn parseval_per_frame() {
        let a = noise(4000, 3);
        let n = 256;
        let plan = StftPlan::<f64>::new(n, 64).unwrap();
        let frames = plan.fill_frames(a.samples());
        let s = stft(&a, n, 64).unwrap();
        for m in 0..s.num_frames() {
            let time: f64 = frames[m * n..(m + 1) * n].iter().map(|c| c.re * c.re).sum();
            let row = s.frame(m);
            let mut freq = row[0].norm_sqr() + row[n / 2].norm_sqr();
            freq += 2.0 * row[1..n / 2].iter().map(|c| c.norm_sqr()).sum::<f64>();
            freq /= n as f64;
            assert!((time - freq).abs() <= 1e-6 * time.max(1e-300), "frame {m}: {time} vs {freq}");
        }
    }

    #[test]
    fn white_noise_round_trip() {
        let a = noise(16_000, 11);
        let s = stft(&a, 1024, 256).unwrap();
        let b = istft(&s).unwrap();
        assert_eq!(b.len(), a.len());
        let err = interior_error(a.samples(), b.samples(), 512);
        assert!(err < 1e-6, "interior error {err}");
    }

    #[test]
    fn impulse_position_preserved() {
        let mut x = vec![0.0; 4096];
        x[2000] = 1.0;
        let a = AudioBuffer::new(x, 16_000).unwrap();
        let b = istft(&stft(&a, 512, 128).unwrap()).unwrap();
        let peak = (0..b.len()).max_by(|&i, &j| b.samples()[i].abs().total_cmp(&b.samples()[j].abs())).unwrap();
        assert_eq!(peak, 2000);
        assert!((b.samples()[2000] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let a = noise(100, 0);
        assert!(matches!(stft(&a, 100, 10), Err(DspError::WindowNotPowerOfTwo(100))));
        assert!(matches!(stft(&a, 64, 65), Err(DspError::InvalidHop { .. })));
        let s = stft(&a, 64, 32).unwrap();
        assert!(matches!(istft(&s), Err(DspError::NotCola { .. })));
    }

    #[test]
    fn synthesize_adjoint_matches_inner_product() {
        // <S(re, im), g> == <(re, im), S*(g)> for the linear synthesis map.
        let plan = StftPlan::<f64>::new(64, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames = 9;
        let bins = plan.bins();
        let re: Vec<f64> = (0..frames * bins).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut im: Vec<f64> = (0..frames * bins).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for m in 0..frames {
            im[m * bins] = 0.0;
            im[m * bins + bins - 1] = 0.0;
        }
        let out_len = frames * 16;
        let y = plan.synthesize(&re, &im, out_len);
        let g: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (gr, gi) = plan.synthesize_backward(&g, frames);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = re.iter().zip(&gr).map(|(a, b)| a * b).sum::<f64>() + im.iter().zip(&gi).map(|(a, b)| a * b).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}
