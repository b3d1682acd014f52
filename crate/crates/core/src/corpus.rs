//! Deterministic synthetic corpus: speech-like formant pulse trains,
//! music-like harmonic chord progressions and audio-like noise events.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::CorpusConfig;
use crate::dsp::{load_wav, write_wav, AudioBuffer, DspError, CANONICAL_SAMPLE_RATE};
use crate::rng::{stream, tag};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
/// Peak level every generated file is normalized to.
const PEAK: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed manifest {path}: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("corpus file {path} does not match its manifest hash")]
    HashMismatch { path: PathBuf },
    #[error(transparent)]
    Dsp(#[from] DspError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Speech,
    Music,
    Audio,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Speech, Family::Music, Family::Audio];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    /// Path relative to the corpus directory.
    pub file: String,
    pub family: Family,
    pub split: Split,
    pub samples: usize,
    /// Hex SHA-256 of the WAV bytes.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub seed: u64,
    pub sample_rate: u32,
    pub file_seconds: f64,
    pub total_seconds: f64,
    pub files: Vec<CorpusEntry>,
}

impl CorpusManifest {
    pub fn count(&self, family: Family) -> usize {
        self.files.iter().filter(|f| f.family == family).count()
    }
}

/// Splits `total` items by `weights` with the largest-remainder rule.
pub fn allocate(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 || weights.is_empty() {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `round(hours · 3600 / file_seconds)` WAV files plus `manifest.json`.
pub fn make_corpus(seed: u64, config: &CorpusConfig, out_dir: &Path) -> Result<CorpusManifest, CorpusError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let sr = CANONICAL_SAMPLE_RATE;
    let len = (config.file_seconds * sr as f64).round() as usize;
    let n = (config.hours * 3600.0 / config.file_seconds).round() as usize;
    let counts = allocate(n, &config.proportions);
    let mut families: Vec<Family> = Family::ALL.iter().zip(&counts).flat_map(|(&f, &c)| std::iter::repeat(f).take(c)).collect();
    families.shuffle(&mut stream(seed, &[tag::CORPUS, 0]));

    let mut files = Vec::with_capacity(n);
    for (i, &family) in families.iter().enumerate() {
        let mut rng = stream(seed, &[tag::CORPUS, 1, i as u64]);
        let audio = synthesize(family, len, sr, &mut rng);
        let name = format!("{i:05}_{}.wav", family_name(family));
        let path = out_dir.join(&name);
        write_wav(&path, &audio)?;
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        let split = if (i + 1) % config.holdout_every.max(1) == 0 { Split::Heldout } else { Split::Train };
        files.push(CorpusEntry { file: name, family, split, samples: len, sha256: sha256_hex(&bytes) });
    }
    let manifest = CorpusManifest {
        format_version: MANIFEST_VERSION,
        seed,
        sample_rate: sr,
        file_seconds: config.file_seconds,
        total_seconds: (n * len) as f64 / sr as f64,
        files,
    };
    let path = out_dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest, CorpusError> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| CorpusError::Manifest { path, source })
}

/// Loads every file of `split` (all files when `None`), verifying hashes.
pub fn load_corpus(dir: &Path, split: Option<Split>) -> Result<(CorpusManifest, Vec<AudioBuffer>), CorpusError> {
    let manifest = read_manifest(dir)?;
    let mut audio = Vec::new();
    for entry in manifest.files.iter().filter(|e| split.is_none_or(|s| e.split == s)) {
        let path = dir.join(&entry.file);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(CorpusError::HashMismatch { path });
        }
        audio.push(load_wav(&path)?);
    }
    Ok((manifest, audio))
}

fn family_name(f: Family) -> &'static str {
    match f {
        Family::Speech => "speech",
        Family::Music => "music",
        Family::Audio => "audio",
    }
}

pub fn synthesize(family: Family, len: usize, sr: u32, rng: &mut ChaCha8Rng) -> AudioBuffer {
    let x = match family {
        Family::Speech => speech_like(len, sr as f64, rng),
        Family::Music => music_like(len, sr as f64, rng),
        Family::Audio => audio_like(len, sr as f64, rng),
    };
    AudioBuffer::new(normalize_peak(x, PEAK), sr).expect("finite synthesis")
}

pub(crate) fn normalize_peak(mut x: Vec<f64>, peak: f64) -> Vec<f64> {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
    x
}

/// Two-pole resonator (constant peak gain band-pass).
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Biquad {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    z1: f64,
    z2: f64,
}

impl Biquad {
    pub(crate) fn bandpass(center: f64, q: f64, sr: f64) -> Self {
        let w = 2.0 * PI * center / sr;
        let alpha = w.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self { b0: alpha / a0, b2: -alpha / a0, a1: -2.0 * w.cos() / a0, a2: (1.0 - alpha) / a0, z1: 0.0, z2: 0.0 }
    }

    /// Changes coefficients while keeping the filter state.
    pub(crate) fn retune(&mut self, center: f64, q: f64, sr: f64) {
        let fresh = Self::bandpass(center, q, sr);
        *self = Self { z1: self.z1, z2: self.z2, ..fresh };
    }

    pub(crate) fn tick(&mut self, x: f64) -> f64 {
        // transposed direct form II
        let y = self.b0 * x + self.z1;
        self.z1 = -self.a1 * y + self.z2;
        self.z2 = self.b2 * x - self.a2 * y;
        y
    }
}

const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
];

fn speech_like(len: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let base_f0 = rng.gen_range(90.0..220.0);
    let mut filters: Vec<Biquad> = VOWELS[0].iter().map(|&f| Biquad::bandpass(f, 8.0, sr)).collect();
    let mut phase = 0.0;
    let mut t = 0usize;
    while t < len {
        let syllable = (rng.gen_range(0.12..0.3) * sr) as usize;
        let pause = (rng.gen_range(0.0..0.12) * sr) as usize;
        let vowel = VOWELS[rng.gen_range(0..VOWELS.len())];
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.9..1.1));
        for (k, f) in filters.iter_mut().enumerate() {
            f.retune(vowel[k] * jitter[k], 8.0, sr);
        }
        let glide = rng.gen_range(-0.25..0.25);
        let end = (t + syllable).min(len);
        for (i, o) in out[t..end].iter_mut().enumerate() {
            let u = i as f64 / syllable as f64;
            let f0 = base_f0 * (1.0 + glide * u + 0.03 * (2.0 * PI * 5.0 * u).sin());
            phase += f0 / sr;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            let excitation = pulse + 0.02 * Distribution::<f64>::sample(&StandardNormal, rng);
            let env = (PI * u).sin().powf(0.6);
            let voiced: f64 = filters.iter_mut().enumerate().map(|(k, f)| f.tick(excitation) / (k + 1) as f64).sum();
            *o = env * voiced;
        }
        t = end + pause;
    }
    out
}

fn midi_hz(note: f64) -> f64 {
    440.0 * 2f64.powf((note - 69.0) / 12.0)
}

fn music_like(len: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const SHAPES: [[f64; 3]; 4] = [[0.0, 4.0, 7.0], [0.0, 3.0, 7.0], [0.0, 5.0, 9.0], [0.0, 4.0, 9.0]];
    let mut out = vec![0.0; len];
    let key = rng.gen_range(48..60) as f64;
    let harmonics = rng.gen_range(3..7);
    let mut t = 0usize;
    while t < len {
        let dur = (rng.gen_range(0.4..1.0) * sr) as usize;
        let root = key + [0.0, 5.0, 7.0, 9.0, 2.0][rng.gen_range(0..5)];
        let shape = SHAPES[rng.gen_range(0..SHAPES.len())];
        let end = (t + dur).min(len);
        for &iv in &shape {
            let f = midi_hz(root + iv);
            let start_phase = rng.gen_range(0.0..1.0);
            for (i, o) in out[t..end].iter_mut().enumerate() {
                let time = i as f64 / sr;
                let env = (time / 0.01).min(1.0) * (-time * 2.5).exp();
                let mut s = 0.0;
                for h in 1..=harmonics {
                    let fh = f * h as f64;
                    if fh < sr / 2.0 {
                        s += (2.0 * PI * (fh * time + start_phase * h as f64)).sin() / h as f64;
                    }
                }
                *o += env * s;
            }
        }
        t = end;
    }
    out
}

fn audio_like(len: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let mut bed = Biquad::bandpass(rng.gen_range(300.0..3000.0), 0.7, sr);
    for o in out.iter_mut() {
        *o = 0.05 * bed.tick(StandardNormal.sample(rng));
    }
    let mut t = (rng.gen_range(0.0..0.2) * sr) as usize;
    while t < len {
        let center = rng.gen_range(200.0..6000.0);
        let q = rng.gen_range(1.0..6.0);
        let decay = rng.gen_range(8.0..40.0);
        let gain = rng.gen_range(0.3..1.0);
        let mut f = Biquad::bandpass(center, q, sr);
        let span = ((5.0 / decay) * sr) as usize;
        for (i, o) in out[t..(t + span).min(len)].iter_mut().enumerate() {
            let env = (-(i as f64 / sr) * decay).exp();
            *o += gain * env * f.tick(StandardNormal.sample(rng));
        }
        t += (rng.gen_range(0.08..0.5) * sr) as usize;
    }
    out
}
