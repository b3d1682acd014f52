use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{AudioBuffer, DspError};

/// Reads a PCM WAV file (16-bit integer or 32-bit float), averaging channels to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, DspError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(DspError::FileNotFound(path.to_path_buf()));
    }
    let unsupported = |reason: String| DspError::UnsupportedFormat { path: path.to_path_buf(), reason };
    let mut reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => DspError::Io { path: path.to_path_buf(), source },
        other => unsupported(other.to_string()),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(unsupported("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| unsupported(e.to_string()))?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(|e| unsupported(e.to_string()))?,
        (fmt, bits) => return Err(unsupported(format!("{bits}-bit {fmt:?} samples"))),
    };
    if interleaved.is_empty() {
        return Err(DspError::EmptyAudio(path.to_path_buf()));
    }
    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    if mono.iter().any(|x| !x.is_finite()) {
        return Err(unsupported("non-finite float samples".into()));
    }
    AudioBuffer::new(mono, spec.sample_rate)
}

/// Writes mono 16-bit little-endian PCM. Samples are clipped to `[-1, 1)`.
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<(), DspError> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let io_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => DspError::Io { path: path.to_path_buf(), source },
        other => DspError::Io { path: path.to_path_buf(), source: std::io::Error::other(other.to_string()) },
    };
    let mut writer = WavWriter::create(path, spec).map_err(io_err)?;
    for &x in audio.samples() {
        let v = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(io_err)?;
    }
    writer.finalize().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw_i16(path: &Path, channels: u16, samples: &[i16]) {
        let spec = WavSpec { channels, sample_rate: 16_000, bits_per_sample: 16, sample_format: SampleFormat::Int };
        let mut w = WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn int16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw_i16(&p, 1, &[0, 16384, -16384]);
        let a = load_wav(&p).unwrap();
        let expect = [0.0, 0.5, -0.5];
        for (x, e) in a.samples().iter().zip(expect) {
            assert!((x - e).abs() < 1e-4);
        }
        assert_eq!(a.sample_rate(), 16_000);
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = WavSpec { channels: 2, sample_rate: 8000, bits_per_sample: 32, sample_format: SampleFormat::Float };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(1.0f32).unwrap();
        w.write_sample(0.0f32).unwrap();
        w.finalize().unwrap();
        let a = load_wav(&p).unwrap();
        assert_eq!(a.samples(), &[0.5]);
        assert_eq!(a.sample_rate(), 8000);
    }

    #[test]
    fn sine_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sine.wav");
        let sr = 16_000;
        let x: Vec<f64> = (0..sr)
            .map(|i| 0.8 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin())
            .collect();
        let a = AudioBuffer::new(x, sr as u32).unwrap();
        write_wav(&p, &a).unwrap();
        let b = load_wav(&p).unwrap();
        assert_eq!(b.len(), a.len());
        let err = a.samples().iter().zip(b.samples()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-4, "round-trip error {err}");
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.wav");
        assert!(matches!(load_wav(&missing), Err(DspError::FileNotFound(_))));

        let garbage = dir.path().join("garbage.wav");
        std::fs::write(&garbage, b"this is not a riff file at all").unwrap();
        assert!(matches!(load_wav(&garbage), Err(DspError::UnsupportedFormat { .. })));

        let pcm8 = dir.path().join("pcm8.wav");
        let spec = WavSpec { channels: 1, sample_rate: 16_000, bits_per_sample: 8, sample_format: SampleFormat::Int };
        let mut w = WavWriter::create(&pcm8, spec).unwrap();
        w.write_sample(3i8).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&pcm8), Err(DspError::UnsupportedFormat { .. })));

        let empty = dir.path().join("empty.wav");
        write_raw_i16(&empty, 1, &[]);
        assert!(matches!(load_wav(&empty), Err(DspError::EmptyAudio(_))));
    }
}
