use std::f64::consts::PI;

use super::AudioBuffer;

/// Zero crossings of the interpolation kernel on each side, measured at the lower of the two rates.
pub const RESAMPLE_HALF_WIDTH: usize = 32;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited windowed-sinc resampling (Hann-windowed kernel).
///
/// Output length is `round(len · target / source)`.
pub fn resample(audio: &AudioBuffer, target_rate: u32) -> AudioBuffer {
    assert!(target_rate > 0, "target rate must be positive");
    let src_rate = audio.sample_rate();
    if src_rate == target_rate {
        return audio.clone();
    }
    let x = audio.samples();
    let ratio = target_rate as f64 / src_rate as f64;
    let out_len = (x.len() as f64 * ratio).round() as usize;
    // Cutoff relative to the input Nyquist; below 1 when downsampling.
    let cutoff = ratio.min(1.0);
    let radius = RESAMPLE_HALF_WIDTH as f64 / cutoff;
    let step = src_rate as f64 / target_rate as f64;

    let out = (0..out_len)
        .map(|i| {
            let t = i as f64 * step;
            let lo = (t - radius).ceil().max(0.0) as usize;
            let hi = ((t + radius).floor() as isize).min(x.len() as isize - 1);
            if hi < lo as isize {
                return 0.0;
            }
            (lo..=hi as usize)
                .map(|j| {
                    let d = t - j as f64;
                    let w = 0.5 * (1.0 + (PI * d / radius).cos());
                    x[j] * cutoff * sinc(cutoff * d) * w
                })
                .sum()
        })
        .collect();
    AudioBuffer::new(out, target_rate).expect("finite input yields finite output")
}
