//! Low-dimensional semantic-acoustic audio tokenizer.
//!
//! The crate is organized bottom-up:
//!
//! - [`dsp`]: WAV I/O, resampling, STFT/ISTFT and log-mel features.
//! - [`grad`]: a small reverse-mode autodiff tape over dense tensors, plus
//!   AdamW with a warmup + cosine schedule.
//! - [`spectral`]: covariance, Jacobi eigensolver, effective rank, variance
//!   component counts, channel merging and PCA.
//! - [`sembo`]: the semantic bottleneck (compressor/restorer MLPs trained
//!   with a normalized reconstruction loss and a Gram time-relation loss).
//! - [`tokenizer`]: the tokenizer itself: frozen teacher, patch-embed
//!   acoustic encoder, unified latent, KL bottleneck, Vocos-style decoder,
//!   multi-resolution STFT discriminator and the full training objective.
//! - [`evalkit`]: reconstruction distances, real-time factor and linear probes.
//! - [`config`], [`checkpoint`], [`corpus`]: run configuration, the binary
//!   checkpoint container and the synthetic corpus generator.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dsp;
pub mod evalkit;
pub mod features;
pub mod grad;
pub mod real;
pub mod rng;
pub mod sembo;
pub mod spectral;
pub mod tensor;
pub mod tokenizer;

pub use dsp::{AudioBuffer, MelFrames};
pub use features::FeatureSequence;
pub use real::Real;
pub use tensor::Tensor;
