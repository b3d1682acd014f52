//! Linear probing on a synthetic labeled tone-family dataset.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::{normalize_peak, Biquad};
use crate::dsp::{AudioBuffer, StftPlan, CANONICAL_SAMPLE_RATE};
use crate::grad::{AdamW, OptimizerSettings, ParamStore};
use crate::rng::{stream, tag};
use crate::tensor::Tensor;
use crate::tokenizer::TokenizerModel;

/// Pure tones, two-tone chords, band-passed noise, amplitude-modulated tones.
pub const MAX_PROBE_CLASSES: usize = 4;
const ITEM_SECONDS: f64 = 1.0;
const TRAIN_SHARE: f64 = 0.8;

#[derive(Debug, Clone)]
pub struct ProbeDataset {
    pub items: Vec<(AudioBuffer, usize)>,
    pub classes: usize,
    /// Indices into `items`.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ProbeDataset {
    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|(_, c)| *c).collect()
    }
}

fn class_item(class: usize, rng: &mut ChaCha8Rng) -> AudioBuffer {
    let sr = CANONICAL_SAMPLE_RATE as f64;
    let n = (ITEM_SECONDS * sr) as usize;
    let t = |i: usize| i as f64 / sr;
    let x: Vec<f64> = match class {
        0 => {
            let f = rng.gen_range(200.0..400.0);
            let p = rng.gen_range(0.0..2.0 * PI);
            (0..n).map(|i| (2.0 * PI * f * t(i) + p).sin()).collect()
        }
        1 => {
            let f = rng.gen_range(500.0..700.0);
            let ratio = [1.25, 4.0 / 3.0, 1.5][rng.gen_range(0..3)];
            let (p1, p2) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
            (0..n).map(|i| (2.0 * PI * f * t(i) + p1).sin() + (2.0 * PI * f * ratio * t(i) + p2).sin()).collect()
        }
        2 => {
            let center = rng.gen_range(2500.0..3500.0);
            let (mut a, mut b) = (Biquad::bandpass(center, 3.0, sr), Biquad::bandpass(center, 3.0, sr));
            (0..n).map(|_| b.tick(a.tick(StandardNormal.sample(rng)))).collect()
        }
        _ => {
            let f = rng.gen_range(1200.0..1600.0);
            let rate = rng.gen_range(4.0..12.0);
            let depth = rng.gen_range(0.5..0.9);
            (0..n).map(|i| (1.0 + depth * (2.0 * PI * rate * t(i)).sin()) * (2.0 * PI * f * t(i)).sin()).collect()
        }
    };
    let level = rng.gen_range(0.2..0.6);
    AudioBuffer::new(normalize_peak(x, level), CANONICAL_SAMPLE_RATE).expect("finite synthesis")
}

/// `items_per_class` one-second items per class with a seeded, per-class
/// stratified 80/20 split.
pub fn make_probe_dataset(seed: u64, classes: usize, items_per_class: usize) -> Result<ProbeDataset, EvalError> {
    if !(2..=MAX_PROBE_CLASSES).contains(&classes) {
        return Err(EvalError::Classes { found: classes, max: MAX_PROBE_CLASSES });
    }
    let mut items = Vec::with_capacity(classes * items_per_class);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let n_train = (items_per_class as f64 * TRAIN_SHARE).round() as usize;
    for c in 0..classes {
        let base = items.len();
        for k in 0..items_per_class {
            let mut rng = stream(seed, &[tag::PROBE, c as u64, k as u64]);
            items.push((class_item(c, &mut rng), c));
        }
        let mut idx: Vec<usize> = (base..base + items_per_class).collect();
        idx.shuffle(&mut stream(seed, &[tag::SPLIT, c as u64]));
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(ProbeDataset { items, classes, train, test })
}

/// Magnitude-weighted mean frequency in Hz (1024-point STFT, hop 256).
pub fn spectral_centroid(audio: &AudioBuffer) -> f64 {
    let plan = StftPlan::<f64>::new(1024, 256).expect("centroid plan");
    let (power, _) = plan.power(audio.samples());
    let bins = plan.bins();
    let bin_hz = audio.sample_rate() as f64 / 1024.0;
    let (mut num, mut den) = (0.0, 0.0);
    for frame in power.chunks(bins) {
        for (k, p) in frame.iter().enumerate() {
            let m = p.sqrt();
            num += k as f64 * bin_hz * m;
            den += m;
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// `z_uni`.
    Unified,
    /// `z_a_low`.
    Acoustic,
    /// `z_s_low`.
    Semantic,
}

/// Time-mean-pooled tokenizer features of one waveform.
pub fn pooled_features(model: &TokenizerModel, audio: &AudioBuffer, kind: FeatureKind) -> Result<Vec<f64>, EvalError> {
    let enc = model.encode_audio(audio)?;
    Ok(match kind {
        FeatureKind::Unified => enc.z_uni.mean_pool(),
        FeatureKind::Acoustic => enc.z_a_low.mean_pool(),
        FeatureKind::Semantic => enc.z_s_low.mean_pool(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeOptions {
    pub steps: u64,
    pub optimizer: OptimizerSettings,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        let eval = crate::config::EvalConfig::default();
        Self { steps: eval.probe_steps, optimizer: eval.probe_optimizer }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub chance: f64,
    /// Predicted class of each test item, in `dataset.test` order.
    pub predictions: Vec<usize>,
}

fn predict(w: &[f64], b: &[f64], x: &[f64], classes: usize) -> Vec<f64> {
    let mut z = b.to_vec();
    for (j, xj) in x.iter().enumerate() {
        for c in 0..classes {
            z[c] += xj * w[j * classes + c];
        }
    }
    z
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Softmax regression on train-split-standardized features, trained
/// full-batch with AdamW from zero initialization; returns test accuracy.
/// `features[i]` belongs to `dataset.items[i]`; `labels` overrides the item labels.
pub fn linear_probe(
    features: &[Vec<f64>],
    dataset: &ProbeDataset,
    labels: Option<&[usize]>,
    options: &ProbeOptions,
) -> Result<ProbeResult, EvalError> {
    let labels = labels.map_or_else(|| dataset.labels(), <[usize]>::to_vec);
    let k = dataset.classes;
    if features.len() != dataset.items.len() || labels.len() != features.len() {
        return Err(EvalError::DegenerateSplit(format!("{} feature rows for {} items", features.len(), dataset.items.len())));
    }
    if dataset.test.is_empty() {
        return Err(EvalError::DegenerateSplit("empty test split".into()));
    }
    let distinct: std::collections::BTreeSet<_> = dataset.train.iter().map(|&i| labels[i]).collect();
    if distinct.len() < 2 {
        return Err(EvalError::DegenerateSplit("training split has a single class".into()));
    }
    let dim = features[0].len();
    let n = dataset.train.len() as f64;
    let mut mean = vec![0.0; dim];
    for &i in &dataset.train {
        mean.iter_mut().zip(&features[i]).for_each(|(m, v)| *m += v / n);
    }
    let mut std = vec![0.0; dim];
    for &i in &dataset.train {
        std.iter_mut().zip(&features[i]).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    let std: Vec<f64> = std.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let standardized: Vec<Vec<f64>> =
        features.iter().map(|f| f.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect()).collect();

    let mut params = ParamStore::<f64>::new();
    params.insert("w", Tensor::zeros(&[dim, k]));
    params.insert("b", Tensor::zeros(&[k]));
    let mut opt = AdamW::new(options.optimizer.adamw(options.steps), &params);
    for _ in 0..options.steps {
        let (w, b) = (params.get("w")?.data().to_vec(), params.get("b")?.data().to_vec());
        let mut gw = vec![0.0; dim * k];
        let mut gb = vec![0.0; k];
        for &i in &dataset.train {
            let z = predict(&w, &b, &standardized[i], k);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let g = (e[c] / s - if labels[i] == c { 1.0 } else { 0.0 }) / n;
                gb[c] += g;
                for (j, xj) in standardized[i].iter().enumerate() {
                    gw[j * k + c] += g * xj;
                }
            }
        }
        let grads = BTreeMap::from([
            ("w".to_string(), Tensor::new(vec![dim, k], gw).expect("grad shape")),
            ("b".to_string(), Tensor::vector(gb)),
        ]);
        opt.step(&mut params, &grads)?;
    }
    let (w, b) = (params.get("w")?.data().to_vec(), params.get("b")?.data().to_vec());
    let accuracy_on = |idx: &[usize]| {
        let hits = idx.iter().filter(|&&i| argmax(&predict(&w, &b, &standardized[i], k)) == labels[i]).count();
        hits as f64 / idx.len() as f64
    };
    let predictions = dataset.test.iter().map(|&i| argmax(&predict(&w, &b, &standardized[i], k))).collect();
    Ok(ProbeResult {
        accuracy: accuracy_on(&dataset.test),
        train_accuracy: accuracy_on(&dataset.train),
        chance: 1.0 / k as f64,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> ProbeOptions {
        ProbeOptions { steps: 300, ..ProbeOptions::default() }
    }

    #[test]
    fn dataset_is_deterministic_and_balanced() {
        let a = make_probe_dataset(7, 4, 10).unwrap();
        let b = make_probe_dataset(7, 4, 10).unwrap();
        assert_eq!(a.items.len(), 40);
        assert!(a.items.iter().zip(&b.items).all(|(x, y)| x == y));
        assert_eq!((a.train.clone(), a.test.clone()), (b.train.clone(), b.test.clone()));
        for c in 0..4 {
            assert_eq!(a.items.iter().filter(|(_, l)| *l == c).count(), 10);
            assert_eq!(a.test.iter().filter(|&&i| a.items[i].1 == c).count(), 2);
        }
        assert!(a.train.iter().all(|i| !a.test.contains(i)));
        assert_eq!(a.train.len() + a.test.len(), 40);
        assert!(a.items.iter().all(|(x, _)| x.len() == 16_000));
        assert!(matches!(make_probe_dataset(0, 1, 10), Err(EvalError::Classes { .. })));
        assert!(matches!(make_probe_dataset(0, 5, 10), Err(EvalError::Classes { .. })));
    }

    #[test]
    fn class_centroids_do_not_overlap() {
        let d = make_probe_dataset(3, 4, 12).unwrap();
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY, 0.0); 4];
        for (x, c) in &d.items {
            let f = spectral_centroid(x);
            let r = &mut ranges[*c];
            *r = (r.0.min(f), r.1.max(f), r.2 + f / 12.0);
        }
        for (i, a) in ranges.iter().enumerate() {
            for (j, b) in ranges.iter().enumerate() {
                if i != j {
                    assert!(a.2 < b.0 || a.2 > b.1, "class {i} mean {:.0} inside class {j} range {:?}", a.2, (b.0, b.1));
                }
            }
        }
    }

    #[test]
    fn one_hot_features_are_perfect() {
        let d = make_probe_dataset(1, 4, 10).unwrap();
        let f: Vec<Vec<f64>> = d.items.iter().map(|(_, c)| (0..4).map(|k| if k == *c { 1.0 } else { 0.0 }).collect()).collect();
        let r = linear_probe(&f, &d, None, &quick()).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn zero_features_sit_at_chance() {
        let d = make_probe_dataset(1, 4, 10).unwrap();
        let f = vec![vec![0.0; 6]; d.items.len()];
        let r = linear_probe(&f, &d, None, &quick()).unwrap();
        assert!((r.accuracy - 0.25).abs() <= 0.1, "{}", r.accuracy);
    }

    #[test]
    fn shuffled_labels_fall_to_chance() {
        let d = make_probe_dataset(2, 4, 25).unwrap();
        let f: Vec<Vec<f64>> = d.items.iter().map(|(x, _)| vec![spectral_centroid(x), x.samples()[100]]).collect();
        let opts = ProbeOptions { steps: 2000, ..ProbeOptions::default() };
        let real = linear_probe(&f, &d, None, &opts).unwrap();
        assert!(real.accuracy >= 0.9, "{}", real.accuracy);
        let mut labels = d.labels();
        labels.shuffle(&mut stream(5, &[]));
        let r = linear_probe(&f, &d, Some(&labels), &opts).unwrap();
        assert!((r.accuracy - 0.25).abs() <= 0.15, "{}", r.accuracy);
    }

    #[test]
    fn single_class_training_split_is_rejected() {
        let d = make_probe_dataset(1, 2, 5).unwrap();
        let f = vec![vec![1.0]; d.items.len()];
        let labels = vec![0; d.items.len()];
        assert!(matches!(linear_probe(&f, &d, Some(&labels), &quick()), Err(EvalError::DegenerateSplit(_))));
    }
}
