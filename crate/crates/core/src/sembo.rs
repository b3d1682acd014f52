//! Semantic bottleneck: a compressor/restorer MLP pair distilling frozen
//! high-dimensional features into a low-dimensional sequence.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureSequence;
use crate::grad::{AdamW, Bound, GradError, Graph, OptimizerSettings, ParamStore, Var};
use crate::real::Real;
use crate::rng::{stream, tag};
use crate::tensor::Tensor;

/// Stabilizer for frame-wise L2 normalization.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SemboError {
    #[error("feature dimension {found} does not match expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("shapes differ: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: (usize, usize), rhs: (usize, usize) },
    #[error("training corpus has no frames")]
    EmptyCorpus,
    #[error("{term} became non-finite at step {step}")]
    NonFinite { step: u64, term: &'static str },
    #[error("invalid model size: {0}")]
    InvalidSize(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemboConfig {
    /// Taken from the teacher width; not read from configuration files.
    #[serde(skip)]
    pub d_high: usize,
    pub hidden: usize,
    pub d_low: usize,
    pub lambda_recon: f64,
    pub steps: u64,
    /// Crops per step.
    pub batch: usize,
    /// Frames per crop.
    pub crop_frames: usize,
    pub optimizer: OptimizerSettings,
}

impl Default for SemboConfig {
    fn default() -> Self {
        Self {
            d_high: 64,
            hidden: 64,
            d_low: 16,
            lambda_recon: 1e3,
            steps: 2000,
            batch: 8,
            crop_frames: 25,
            optimizer: OptimizerSettings { base_lr: 5e-3, min_lr: 1e-5, ..OptimizerSettings::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemboModel {
    pub d_high: usize,
    pub hidden: usize,
    pub d_low: usize,
    pub params: ParamStore<f32>,
}

/// `[T, T]` cosine-similarity matrix of frame-normalized features.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub size: usize,
    pub values: Vec<f64>,
}

impl GramMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }
}

fn mlp<'g, T: Real>(bound: &Bound<'g, T>, prefix: &str, x: Var<'g, T>) -> Result<Var<'g, T>, GradError> {
    let h = bound.linear(&format!("{prefix}.0"), x)?.gelu();
    bound.linear(&format!("{prefix}.1"), h)
}

impl SemboModel {
    pub fn new(config: &SemboConfig, seed: u64) -> Result<Self, SemboError> {
        let (d_high, hidden, d_low) = (config.d_high, config.hidden, config.d_low);
        if d_high == 0 || hidden == 0 || d_low == 0 || d_low >= d_high {
            return Err(SemboError::InvalidSize(format!("d_high={d_high} hidden={hidden} d_low={d_low}")));
        }
        let mut rng = stream(seed, &[tag::INIT, 0x5e]);
        let mut params = ParamStore::new();
        params.insert_linear("compressor.0", d_high, hidden, &mut rng);
        params.insert_linear("compressor.1", hidden, d_low, &mut rng);
        params.insert_linear("restorer.0", d_low, hidden, &mut rng);
        params.insert_linear("restorer.1", hidden, d_high, &mut rng);
        Ok(Self { d_high, hidden, d_low, params })
    }

    /// Rebuilds a model around loaded parameters, checking their shapes.
    pub fn from_params(config: &SemboConfig, params: ParamStore<f32>) -> Result<Self, SemboError> {
        let template = Self::new(config, 0)?;
        template.params.check_compatible(&params)?;
        Ok(Self { params, ..template })
    }

    pub fn compress_var<'g, T: Real>(bound: &Bound<'g, T>, z_high: Var<'g, T>) -> Result<Var<'g, T>, GradError> {
        mlp(bound, "compressor", z_high)
    }

    pub fn restore_var<'g, T: Real>(bound: &Bound<'g, T>, z_low: Var<'g, T>) -> Result<Var<'g, T>, GradError> {
        mlp(bound, "restorer", z_low)
    }

    fn apply(&self, z: &FeatureSequence, input: usize, output: usize, prefix: &str) -> Result<FeatureSequence, SemboError> {
        if z.dim() != input {
            return Err(SemboError::Dimension { expected: input, found: z.dim() });
        }
        if z.num_frames() == 0 {
            return Ok(FeatureSequence::empty(output, z.frame_rate()));
        }
        let params = self.params.cast::<f64>();
        let g = Graph::new();
        let bound = params.bind_frozen(&g);
        let y = mlp(&bound, prefix, g.constant(z.to_tensor()))?;
        Ok(FeatureSequence::from_tensor(&y.value(), z.frame_rate()))
    }

    /// Frame-wise `D_high → d_low` map.
    pub fn compress(&self, z_high: &FeatureSequence) -> Result<FeatureSequence, SemboError> {
        self.apply(z_high, self.d_high, self.d_low, "compressor")
    }

    /// Frame-wise `d_low → D_high` map.
    pub fn restore(&self, z_low: &FeatureSequence) -> Result<FeatureSequence, SemboError> {
        self.apply(z_low, self.d_low, self.d_high, "restorer")
    }
}

/// `‖norm(z_hat) − sg(norm(z_target))‖_F / sqrt(T·D)` with frame-wise normalization.
pub fn recon_loss_var<'g, T: Real>(z_hat: Var<'g, T>, z_target: Var<'g, T>) -> Result<Var<'g, T>, GradError> {
    let shape = z_hat.shape();
    if shape != z_target.shape() || shape.len() != 2 {
        return Err(GradError::shape("recon_loss", &shape, &z_target.shape()));
    }
    let count = (shape[0] * shape[1]).max(1) as f64;
    let target = z_target.normalize_rows(NORM_EPS)?.stop_gradient();
    let diff = z_hat.normalize_rows(NORM_EPS)?.sub(target)?;
    Ok(diff.norm_all().scale(1.0 / count.sqrt()))
}

pub fn gram_var<'g, T: Real>(z: Var<'g, T>) -> Result<Var<'g, T>, GradError> {
    let n = z.normalize_rows(NORM_EPS)?;
    n.matmul(n.transpose()?)
}

/// `‖G(z_low) − sg(G(z_high))‖_F / T`.
pub fn time_relation_var<'g, T: Real>(z_low: Var<'g, T>, z_high: Var<'g, T>) -> Result<Var<'g, T>, GradError> {
    let (sl, sh) = (z_low.shape(), z_high.shape());
    if sl.len() != 2 || sh.len() != 2 || sl[0] != sh[0] {
        return Err(GradError::shape("time_relation", &sl, &sh));
    }
    let target = gram_var(z_high)?.stop_gradient();
    let diff = gram_var(z_low)?.sub(target)?;
    Ok(diff.norm_all().scale(1.0 / sl[0].max(1) as f64))
}

/// Per-crop objective terms `(L_recon, L_tr, λ·L_recon + L_tr)` on a bound model.
pub fn objective_var<'g, T: Real>(
    bound: &Bound<'g, T>,
    z_high: Var<'g, T>,
    lambda_recon: f64,
) -> Result<(Var<'g, T>, Var<'g, T>, Var<'g, T>), GradError> {
    let z_low = SemboModel::compress_var(bound, z_high)?;
    let z_hat = SemboModel::restore_var(bound, z_low)?;
    let recon = recon_loss_var(z_hat, z_high)?;
    let tr = time_relation_var(z_low, z_high)?;
    let total = recon.scale(lambda_recon).add(tr)?;
    Ok((recon, tr, total))
}

fn shape_pair(a: &FeatureSequence, b: &FeatureSequence) -> ((usize, usize), (usize, usize)) {
    ((a.num_frames(), a.dim()), (b.num_frames(), b.dim()))
}

pub fn loss_recon(z_hat: &FeatureSequence, z_target: &FeatureSequence) -> Result<f64, SemboError> {
    let (lhs, rhs) = shape_pair(z_hat, z_target);
    if lhs != rhs {
        return Err(SemboError::ShapeMismatch { lhs, rhs });
    }
    if lhs.0 == 0 {
        return Ok(0.0);
    }
    let g = Graph::<f64>::new();
    Ok(recon_loss_var(g.constant(z_hat.to_tensor()), g.constant(z_target.to_tensor()))?.item())
}

pub fn gram(z: &FeatureSequence) -> GramMatrix {
    let t = z.num_frames();
    if t == 0 {
        return GramMatrix { size: 0, values: Vec::new() };
    }
    let g = Graph::<f64>::new();
    let values = gram_var(g.constant(z.to_tensor())).expect("matrix input").value().into_data();
    GramMatrix { size: t, values }
}

pub fn loss_time_relation(z_low: &FeatureSequence, z_high: &FeatureSequence) -> Result<f64, SemboError> {
    let (lhs, rhs) = shape_pair(z_low, z_high);
    if lhs.0 != rhs.0 {
        return Err(SemboError::ShapeMismatch { lhs, rhs });
    }
    if lhs.0 == 0 {
        return Ok(0.0);
    }
    let g = Graph::<f64>::new();
    Ok(time_relation_var(g.constant(z_low.to_tensor()), g.constant(z_high.to_tensor()))?.item())
}

/// Terms of the combined objective on one sequence, evaluated at 64-bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemboLosses {
    pub loss_recon: f64,
    pub loss_tr: f64,
    pub total: f64,
}

pub fn sembo_objective(model: &SemboModel, z_high: &FeatureSequence, lambda_recon: f64) -> Result<SemboLosses, SemboError> {
    if z_high.dim() != model.d_high {
        return Err(SemboError::Dimension { expected: model.d_high, found: z_high.dim() });
    }
    if z_high.num_frames() == 0 {
        return Ok(SemboLosses { loss_recon: 0.0, loss_tr: 0.0, total: 0.0 });
    }
    let params = model.params.cast::<f64>();
    let g = Graph::new();
    let bound = params.bind_frozen(&g);
    let (r, t, total) = objective_var(&bound, g.constant(z_high.to_tensor()), lambda_recon)?;
    Ok(SemboLosses { loss_recon: r.item(), loss_tr: t.item(), total: total.item() })
}

/// Mean objective terms over every sequence of a corpus.
pub fn evaluate_sembo(model: &SemboModel, corpus: &[FeatureSequence], lambda_recon: f64) -> Result<SemboLosses, SemboError> {
    let items: Vec<_> = corpus.iter().filter(|z| z.num_frames() > 0).collect();
    if items.is_empty() {
        return Err(SemboError::EmptyCorpus);
    }
    let mut acc = SemboLosses { loss_recon: 0.0, loss_tr: 0.0, total: 0.0 };
    for z in &items {
        let l = sembo_objective(model, z, lambda_recon)?;
        acc.loss_recon += l.loss_recon;
        acc.loss_tr += l.loss_tr;
        acc.total += l.total;
    }
    let n = items.len() as f64;
    Ok(SemboLosses { loss_recon: acc.loss_recon / n, loss_tr: acc.loss_tr / n, total: acc.total / n })
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemboRecord {
    pub step: u64,
    pub loss_recon: f64,
    pub loss_tr: f64,
    pub total: f64,
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "step,loss_recon,loss_tr,total,lr";

pub fn history_csv(records: &[SemboRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", r.step, r.loss_recon, r.loss_tr, r.total, r.lr));
    }
    out
}

pub struct SemboRun {
    pub model: SemboModel,
    pub optimizer: AdamW<f32>,
    pub history: Vec<SemboRecord>,
}

/// Draws `batch` crops of up to `crop` frames for `step`.
pub(crate) fn sample_crops(corpus: &[FeatureSequence], batch: usize, crop: usize, seed: u64, step: u64) -> Vec<FeatureSequence> {
    let pool: Vec<&FeatureSequence> = corpus.iter().filter(|z| z.num_frames() > 0).collect();
    let mut rng = stream(seed, &[tag::BATCH, step]);
    (0..batch)
        .map(|_| {
            let z = pool[rng.gen_range(0..pool.len())];
            let len = crop.min(z.num_frames()).max(1);
            let start = rng.gen_range(0..=z.num_frames() - len);
            z.slice(start, len)
        })
        .collect()
}

/// Minibatch AdamW training on frozen teacher features.
pub fn train_sembo(corpus: &[FeatureSequence], config: &SemboConfig, seed: u64) -> Result<SemboRun, SemboError> {
    train_sembo_with(corpus, config, seed, |_| {})
}

/// As [`train_sembo`], invoking `on_step` after each update.
pub fn train_sembo_with(
    corpus: &[FeatureSequence],
    config: &SemboConfig,
    seed: u64,
    mut on_step: impl FnMut(&SemboRecord),
) -> Result<SemboRun, SemboError> {
    if corpus.iter().all(|z| z.num_frames() == 0) {
        return Err(SemboError::EmptyCorpus);
    }
    if let Some(z) = corpus.iter().find(|z| z.dim() != config.d_high) {
        return Err(SemboError::Dimension { expected: config.d_high, found: z.dim() });
    }
    let mut model = SemboModel::new(config, seed)?;
    let mut optimizer = AdamW::new(config.optimizer.adamw(config.steps), &model.params);
    let mut history = Vec::with_capacity(config.steps as usize);
    let batch = config.batch.max(1);
    for step in 1..=config.steps {
        let crops = sample_crops(corpus, batch, config.crop_frames.max(1), seed, step);
        let g = Graph::<f32>::new();
        let bound = model.params.bind(&g);
        let mut sums = (0.0f64, 0.0f64);
        let mut total: Option<Var<'_, f32>> = None;
        for crop in &crops {
            let x = g.constant(crop.to_tensor());
            let (r, t, obj) = objective_var(&bound, x, config.lambda_recon)?;
            sums.0 += r.item().as_f64();
            sums.1 += t.item().as_f64();
            total = Some(match total {
                Some(acc) => acc.add(obj)?,
                None => obj,
            });
        }
        let loss = total.expect("non-empty batch").scale(1.0 / batch as f64);
        let n = batch as f64;
        let record = SemboRecord {
            step,
            loss_recon: sums.0 / n,
            loss_tr: sums.1 / n,
            total: loss.item().as_f64(),
            lr: optimizer.next_lr(),
        };
        for (term, v) in [("loss_recon", record.loss_recon), ("loss_tr", record.loss_tr), ("total", record.total)] {
            if !v.is_finite() {
                return Err(SemboError::NonFinite { step, term });
            }
        }
        let grads = bound.collect(&g.backward(loss)?);
        optimizer.step(&mut model.params, &grads)?;
        on_step(&record);
        history.push(record);
    }
    Ok(SemboRun { model, optimizer, history })
}

/// Seeded features of exact rank `rank`, embedded in `dim` dimensions with a
/// nonzero offset, `items` sequences of `frames` frames at 25 Hz.
pub fn synthetic_low_rank(seed: u64, items: usize, frames: usize, dim: usize, rank: usize) -> Vec<FeatureSequence> {
    let mut rng = stream(seed, &[tag::TEACHER, rank as u64, dim as u64]);
    let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let basis = gauss(rank * dim);
    let offset: Vec<f64> = gauss(dim).into_iter().map(|v| 0.5 * v).collect();
    (0..items)
        .map(|_| {
            let coeffs = gauss(frames * rank);
            let values = (0..frames)
                .flat_map(|t| {
                    let c = &coeffs[t * rank..(t + 1) * rank];
                    let basis = &basis;
                    let offset = &offset;
                    (0..dim).map(move |d| offset[d] + (0..rank).map(|k| c[k] * basis[k * dim + d]).sum::<f64>())
                })
                .collect();
            FeatureSequence::new(values, dim, 25.0).expect("shape")
        })
        .collect()
}

/// Tensor helper for tests and callers holding raw frames.
pub fn sequence_tensor<T: Real>(z: &FeatureSequence) -> Tensor<T> {
    z.to_tensor()
}
