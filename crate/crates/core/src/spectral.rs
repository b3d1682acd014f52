//! Covariance spectra of frame-level features and the training-free reductions.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureSequence;

pub const JACOBI_MAX_SWEEPS: usize = 100;
pub const DEFAULT_PCA_FRAME_CAP: usize = 1_000_000;
pub const DEFAULT_ALPHA: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("covariance needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("feature dimensions differ: {expected} vs {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not square: {len} entries for dimension {dim}")]
    NotSquare { dim: usize, len: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("Jacobi iteration did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("eigenvalue {0:e} is significantly negative")]
    NegativeEigenvalue(f64),
    #[error("spectrum is empty or all zero")]
    ZeroSpectrum,
    #[error("alpha must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("dimension {dim} is not divisible by group size {group}")]
    IndivisibleDimension { dim: usize, group: usize },
    #[error("cannot retain {retained} components of a {dim}-dimensional space")]
    RetainedTooLarge { retained: usize, dim: usize },
    #[error("PCA fit needs more than {retained} frames, got {frames}")]
    TooFewFramesForPca { frames: usize, retained: usize },
}

/// Row-major symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl SymMatrix {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self, SpectralError> {
        if values.len() != dim * dim {
            return Err(SpectralError::NotSquare { dim, len: values.len() });
        }
        Ok(Self { dim, values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    pub fn frobenius(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn common_dim(sets: &[FeatureSequence]) -> Result<usize, SpectralError> {
    let dim = sets.first().map(FeatureSequence::dim).unwrap_or(0);
    for s in sets {
        if s.dim() != dim {
            return Err(SpectralError::DimensionMismatch { expected: dim, found: s.dim() });
        }
    }
    Ok(dim)
}

fn pooled(sets: &[FeatureSequence]) -> impl Iterator<Item = &[f64]> + Clone {
    sets.iter().flat_map(FeatureSequence::frames)
}

fn covariance_of<'a>(frames: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> Result<SymMatrix, SpectralError> {
    let n = frames.clone().count();
    if n < 2 {
        return Err(SpectralError::TooFewFrames(n));
    }
    let mut mean = vec![0.0; dim];
    for f in frames.clone() {
        mean.iter_mut().zip(f).for_each(|(m, &x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; dim * dim];
    let mut centered = vec![0.0; dim];
    for f in frames {
        centered.iter_mut().zip(f.iter().zip(&mean)).for_each(|(c, (&x, &m))| *c = x - m);
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = &mut cov[i * dim..(i + 1) * dim];
            for j in i..dim {
                row[j] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / denom;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    SymMatrix::new(dim, cov)
}

/// Unbiased covariance of all frames pooled across `sets`.
pub fn covariance(sets: &[FeatureSequence]) -> Result<SymMatrix, SpectralError> {
    let dim = common_dim(sets)?;
    covariance_of(pooled(sets), dim)
}

/// Eigen-decomposition with eigenvalues sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigen {
    pub values: Vec<f64>,
    /// `vectors[i]` is the unit eigenvector for `values[i]`.
    pub vectors: Vec<Vec<f64>>,
    pub sweeps: usize,
}

/// Cyclic Jacobi eigensolver for a symmetric positive semi-definite matrix.
pub fn eig_sym(matrix: &SymMatrix) -> Result<Eigen, SpectralError> {
    let n = matrix.dim;
    let scale = matrix.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            asym = asym.max((matrix.get(i, j) - matrix.get(j, i)).abs());
        }
    }
    if asym > 1e-8 * scale {
        return Err(SpectralError::NotSymmetric(asym));
    }
    let mut a = matrix.values.clone();
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
    let norm = matrix.frobenius();
    let mut v = vec![0.0; n * n];
    (0..n).for_each(|i| v[i * n + i] = 1.0);

    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off(&a) >= 1e-10 * norm && norm > 0.0 {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(SpectralError::NoConvergence(JACOBI_MAX_SWEEPS));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let lmax = order.first().map(|&i| a[i * n + i]).unwrap_or(0.0).max(0.0);
    let mut values = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n);
    for &i in &order {
        let mut lam = a[i * n + i];
        if lam < 0.0 {
            if lam < -1e-8 * lmax.max(f64::MIN_POSITIVE) && lam < -1e-300 {
                return Err(SpectralError::NegativeEigenvalue(lam));
            }
            lam = 0.0;
        }
        values.push(lam);
        vectors.push((0..n).map(|k| v[k * n + i]).collect());
    }
    Ok(Eigen { values, vectors, sweeps })
}

/// `exp` of the Shannon entropy of the normalized spectrum.
pub fn effective_rank(eigenvalues: &[f64]) -> Result<f64, SpectralError> {
    let p = normalized(eigenvalues)?;
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    Ok(h.exp())
}

fn normalized(eigenvalues: &[f64]) -> Result<Vec<f64>, SpectralError> {
    let total: f64 = eigenvalues.iter().sum();
    if eigenvalues.is_empty() || total <= 0.0 || eigenvalues.iter().any(|&l| l < 0.0 || !l.is_finite()) {
        return Err(SpectralError::ZeroSpectrum);
    }
    Ok(eigenvalues.iter().map(|l| l / total).collect())
}

/// Smallest `k` whose top-`k` eigenvalues carry at least `alpha` of the total.
pub fn variance_components(eigenvalues: &[f64], alpha: f64) -> Result<usize, SpectralError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(SpectralError::InvalidAlpha(alpha));
    }
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return Err(SpectralError::ZeroSpectrum);
    }
    let mut sorted = eigenvalues.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let target = alpha * total;
    let mut acc = 0.0;
    for (k, l) in sorted.iter().enumerate() {
        acc += l;
        // cumulative sums can land one ulp short of an exact ratio
        if acc >= target || (target - acc) <= 4.0 * f64::EPSILON * total {
            return Ok(k + 1);
        }
    }
    Ok(sorted.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumStats {
    pub eigenvalues: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub effective_rank: f64,
    /// Keyed by alpha formatted with up to 4 decimals.
    pub k_alpha: BTreeMap<String, usize>,
}

pub fn alpha_key(alpha: f64) -> String {
    let s = format!("{alpha:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

impl SpectrumStats {
    pub fn from_eigenvalues(eigenvalues: Vec<f64>, alphas: &[f64]) -> Result<Self, SpectralError> {
        let mut eigenvalues = eigenvalues;
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        let probabilities = normalized(&eigenvalues)?;
        let effective_rank = effective_rank(&eigenvalues)?;
        let mut k_alpha = BTreeMap::new();
        for &a in alphas {
            k_alpha.insert(alpha_key(a), variance_components(&eigenvalues, a)?);
        }
        Ok(Self { eigenvalues, probabilities, effective_rank, k_alpha })
    }
}

/// JSON document written by the `analyze` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub dim: usize,
    pub num_frames: usize,
    pub effective_rank: f64,
    pub k_alpha: BTreeMap<String, usize>,
    pub eigenvalues: Vec<f64>,
}

pub fn analyze(sets: &[FeatureSequence], alphas: &[f64]) -> Result<AnalysisReport, SpectralError> {
    let cov = covariance(sets)?;
    let eig = eig_sym(&cov)?;
    let stats = SpectrumStats::from_eigenvalues(eig.values, alphas)?;
    Ok(AnalysisReport {
        dim: cov.dim,
        num_frames: sets.iter().map(FeatureSequence::num_frames).sum(),
        effective_rank: stats.effective_rank,
        k_alpha: stats.k_alpha,
        eigenvalues: stats.eigenvalues,
    })
}

/// Averages each run of `group` consecutive channels.
pub fn channel_merge(frames: &FeatureSequence, group: usize) -> Result<FeatureSequence, SpectralError> {
    let dim = frames.dim();
    if group == 0 || dim % group != 0 {
        return Err(SpectralError::IndivisibleDimension { dim, group });
    }
    let out_dim = dim / group;
    let values = frames
        .frames()
        .flat_map(|f| f.chunks(group).map(|c| c.iter().sum::<f64>() / group as f64))
        .collect();
    Ok(FeatureSequence::new(values, out_dim, frames.frame_rate()).expect("merged shape"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// `retained × dim`, orthonormal rows.
    pub components: Vec<Vec<f64>>,
    pub retained: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcaOptions {
    pub frame_cap: usize,
    pub seed: u64,
}

impl Default for PcaOptions {
    fn default() -> Self {
        Self { frame_cap: DEFAULT_PCA_FRAME_CAP, seed: 0 }
    }
}

pub fn pca_fit(sets: &[FeatureSequence], retained: usize) -> Result<PcaProjection, SpectralError> {
    pca_fit_with(sets, retained, PcaOptions::default())
}

/// PCA on pooled frames, reservoir-sampling down to `frame_cap` frames first.
pub fn pca_fit_with(sets: &[FeatureSequence], retained: usize, opts: PcaOptions) -> Result<PcaProjection, SpectralError> {
    let dim = common_dim(sets)?;
    if retained > dim {
        return Err(SpectralError::RetainedTooLarge { retained, dim });
    }
    let total: usize = sets.iter().map(FeatureSequence::num_frames).sum();
    if total <= retained {
        return Err(SpectralError::TooFewFramesForPca { frames: total, retained });
    }
    let sample: Vec<&[f64]> = if total > opts.frame_cap.max(2) {
        let cap = opts.frame_cap.max(2);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut reservoir: Vec<&[f64]> = Vec::with_capacity(cap);
        for (i, f) in pooled(sets).enumerate() {
            if i < cap {
                reservoir.push(f);
            } else {
                let j = rng.gen_range(0..=i);
                if j < cap {
                    reservoir[j] = f;
                }
            }
        }
        reservoir
    } else {
        pooled(sets).collect()
    };
    let n = sample.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in &sample {
        mean.iter_mut().zip(f.iter()).for_each(|(m, &x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let cov = covariance_of(sample.iter().copied(), dim)?;
    let eig = eig_sym(&cov)?;
    Ok(PcaProjection { mean, components: eig.vectors.into_iter().take(retained).collect(), retained })
}

pub fn pca_project(proj: &PcaProjection, frames: &FeatureSequence) -> Result<FeatureSequence, SpectralError> {
    if frames.dim() != proj.mean.len() {
        return Err(SpectralError::DimensionMismatch { expected: proj.mean.len(), found: frames.dim() });
    }
    let mut values = Vec::with_capacity(frames.num_frames() * proj.retained);
    for f in frames.frames() {
        for row in &proj.components {
            values.push(row.iter().zip(f.iter().zip(&proj.mean)).map(|(r, (x, m))| r * (x - m)).sum());
        }
    }
    Ok(FeatureSequence::new(values, proj.retained, frames.frame_rate()).expect("projected shape"))
}
