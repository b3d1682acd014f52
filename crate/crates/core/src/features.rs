//! Frame-indexed feature matrices.

use crate::real::Real;
use crate::tensor::Tensor;

/// A `T × D` sequence of real feature frames sampled at `frame_rate` Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    values: Vec<f64>,
    num_frames: usize,
    dim: usize,
    frame_rate: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("feature buffer of length {len} is not a multiple of dimension {dim}")]
pub struct FeatureShapeError {
    pub len: usize,
    pub dim: usize,
}

impl FeatureSequence {
    pub fn new(values: Vec<f64>, dim: usize, frame_rate: f64) -> Result<Self, FeatureShapeError> {
        if dim == 0 || values.len() % dim != 0 {
            return Err(FeatureShapeError { len: values.len(), dim });
        }
        Ok(Self { num_frames: values.len() / dim, values, dim, frame_rate })
    }

    pub fn from_rows(rows: &[Vec<f64>], frame_rate: f64) -> Result<Self, FeatureShapeError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(FeatureShapeError { len: rows.iter().map(Vec::len).sum(), dim });
        }
        Self::new(rows.concat(), dim, frame_rate)
    }

    /// An empty sequence of the given width.
    pub fn empty(dim: usize, frame_rate: f64) -> Self {
        Self { values: Vec::new(), num_frames: 0, dim, frame_rate }
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>, frame_rate: f64) -> Self {
        let (rows, cols) = t.dims2();
        Self { values: crate::real::widen(t.data()), num_frames: rows, dim: cols, frame_rate }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.num_frames, self.dim], &self.values).expect("consistent shape")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> + Clone {
        self.values.chunks(self.dim.max(1))
    }

    /// Frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        let end = (start + len).min(self.num_frames);
        Self {
            values: self.values[start * self.dim..end * self.dim].to_vec(),
            num_frames: end - start,
            dim: self.dim,
            frame_rate: self.frame_rate,
        }
    }

    /// Average over frames.
    pub fn mean_pool(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for f in self.frames() {
            for (a, x) in acc.iter_mut().zip(f) {
                *a += x;
            }
        }
        let n = self.num_frames.max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}
