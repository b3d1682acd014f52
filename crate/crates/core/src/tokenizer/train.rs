//! Adversarial training loop with periodic checkpoints and exact resume.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::objective::{discriminator_loss_var, generator_objective_var, prepare_item, LossBreakdown, Plans};
use super::{TeacherConfig, TokenizerConfig, TokenizerError, TokenizerModel};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::AudioConfig;
use crate::dsp::AudioBuffer;
use crate::grad::{AdamW, Graph};
use crate::real::Real;
use crate::rng::{stream, tag};
use crate::sembo::{SemboConfig, SemboModel};

pub const CHECKPOINT_KIND: &str = "tokenizer";
pub const HISTORY_HEADER: &str = "step,mel,l_h,l_l,kl,fm,adv,d_loss,generator,lr";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub lr: f64,
}

pub fn history_csv(records: &[TrainRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in records {
        let l = &r.losses;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.step, l.mel, l.l_h, l.l_l, l.kl, l.fm, l.adv, l.d_loss, l.generator, r.lr
        ));
    }
    out
}

/// Model, both optimizers and the step counter. Per-step randomness is derived
/// from `(seed, step)`, so this is the complete training state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: TokenizerModel,
    pub seed: u64,
    pub opt_g: AdamW<f32>,
    pub opt_d: AdamW<f32>,
    pub step: u64,
    pub history: Vec<TrainRecord>,
}

impl TrainState {
    pub fn new(model: TokenizerModel, seed: u64) -> Self {
        let cfg = model.config.optimizer.adamw(model.config.steps);
        let opt_g = AdamW::new(cfg, &model.generator);
        let opt_d = AdamW::new(cfg, &model.discriminator);
        Self { model, seed, opt_g, opt_d, step: 0, history: Vec::new() }
    }

    /// Everything needed to rebuild the model, `checkpoint_every` excluded.
    pub fn config_echo(&self) -> Value {
        let m = &self.model;
        let mut tok = serde_json::to_value(&m.config).expect("config serializes");
        if let Some(obj) = tok.as_object_mut() {
            obj.remove("checkpoint_every");
        }
        json!({
            "seed": self.seed,
            "audio": m.audio,
            "teacher": TeacherConfig { seed: m.teacher.seed(), d_high: m.teacher.d_high() },
            "sembo": { "d_high": m.sembo.d_high, "hidden": m.sembo.hidden, "d_low": m.sembo.d_low },
            "tokenizer": tok,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, self.step, self.config_echo());
        ck.put_store("generator", &self.model.generator);
        ck.put_store("discriminator", &self.model.discriminator);
        ck.put_store("sembo", &self.model.sembo.params);
        ck.put_optimizer("opt_g", &self.opt_g);
        ck.put_optimizer("opt_d", &self.opt_d);
        ck.meta.insert("history".into(), serde_json::to_value(&self.history).expect("history serializes"));
        ck
    }

    /// Draws the crops of `step` (1-based).
    pub fn batch_crops(&self, corpus: &[AudioBuffer], step: u64) -> Vec<AudioBuffer> {
        let cfg = &self.model.config;
        let crop = (cfg.crop_seconds * self.model.audio.sample_rate as f64).round() as usize;
        (0..cfg.batch as u64)
            .map(|i| {
                let mut rng = stream(self.seed, &[tag::BATCH, step, i]);
                let item = &corpus[rng.gen_range(0..corpus.len())];
                let start = if item.len() > crop { rng.gen_range(0..=item.len() - crop) } else { 0 };
                let end = (start + crop).min(item.len());
                AudioBuffer::new(item.samples()[start..end].to_vec(), item.sample_rate())
                    .expect("slice of valid audio")
                    .fit_to(crop)
            })
            .collect()
    }

    /// One discriminator and one generator update, both against the
    /// pre-step parameters of the other network.
    pub fn step(&mut self, corpus: &[AudioBuffer], plans: &Plans<f32>) -> Result<TrainRecord, TokenizerError> {
        let step = self.step + 1;
        let items = self
            .batch_crops(corpus, step)
            .iter()
            .enumerate()
            .map(|(i, c)| prepare_item::<f32>(&self.model, c, plans, self.seed, step, i as u64))
            .collect::<Result<Vec<_>, _>>()?;
        let m = &self.model;

        let g = Graph::new();
        let gen = m.generator.bind(&g);
        let disc_frozen = m.discriminator.bind_frozen(&g);
        let (total, terms) = generator_objective_var(&gen, &disc_frozen, &m.dims, &m.config.weights, &items, plans)?;
        let x_hats: Vec<_> = terms.x_hats.iter().map(|v| v.value()).collect();
        let mut losses = terms.breakdown(&m.config.weights);
        let g_grads = gen.collect(&g.backward(total)?);

        let gd = Graph::new();
        let disc = m.discriminator.bind(&gd);
        let d_loss = discriminator_loss_var(&disc, &items, &x_hats, plans)?;
        losses.d_loss = d_loss.item().as_f64();
        let d_grads = disc.collect(&gd.backward(d_loss)?);

        if let Some(term) = losses.non_finite() {
            return Err(TokenizerError::NonFinite { step, term });
        }
        let lr = self.opt_g.step(&mut self.model.generator, &g_grads)?;
        self.opt_d.step(&mut self.model.discriminator, &d_grads)?;
        self.step = step;
        let record = TrainRecord { step, losses, lr };
        self.history.push(record);
        Ok(record)
    }
}

/// Rebuilds the training state from a tokenizer checkpoint alone.
pub fn load_tokenizer(ck: &Checkpoint) -> Result<TrainState, TokenizerError> {
    ck.expect_kind(CHECKPOINT_KIND)?;
    let field = |k: &str| ck.config.get(k).cloned().ok_or_else(|| CheckpointError::Manifest(format!("config lacks {k}")));
    let parse_err = |e: serde_json::Error| TokenizerError::Checkpoint(CheckpointError::Header(e));
    let seed: u64 = serde_json::from_value(field("seed")?).map_err(parse_err)?;
    let audio: AudioConfig = serde_json::from_value(field("audio")?).map_err(parse_err)?;
    let teacher: TeacherConfig = serde_json::from_value(field("teacher")?).map_err(parse_err)?;
    let config: TokenizerConfig = serde_json::from_value(field("tokenizer")?).map_err(parse_err)?;
    let sembo_dims = field("sembo")?;
    let dim = |k: &str| sembo_dims.get(k).and_then(Value::as_u64).map(|v| v as usize);
    let (Some(d_high), Some(hidden), Some(d_low)) = (dim("d_high"), dim("hidden"), dim("d_low")) else {
        return Err(CheckpointError::Manifest("incomplete semantic bottleneck dims".into()).into());
    };
    let sembo_cfg = SemboConfig { d_high, hidden, d_low, ..SemboConfig::default() };
    let sembo = SemboModel::from_params(&sembo_cfg, ck.take_store("sembo"))?;
    let mut model = TokenizerModel::new(&audio, &teacher, sembo, &config, seed)?;
    let generator = ck.take_store("generator");
    let discriminator = ck.take_store("discriminator");
    model.generator.check_compatible(&generator)?;
    model.discriminator.check_compatible(&discriminator)?;
    model.generator = generator;
    model.discriminator = discriminator;
    let adam = config.optimizer.adamw(config.steps);
    let opt_g = ck.take_optimizer("opt_g", adam)?;
    let opt_d = ck.take_optimizer("opt_d", adam)?;
    let history = match ck.meta.get("history") {
        Some(h) => serde_json::from_value(h.clone()).map_err(parse_err)?,
        None => Vec::new(),
    };
    Ok(TrainState { model, seed, opt_g, opt_d, step: ck.step, history })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for `step_XXXXXX.ckpt` files every `checkpoint_every` steps.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop early after this many total steps.
    pub stop_after: Option<u64>,
}

/// Trains until `config.steps` (or `stop_after`), invoking `on_step` after each update.
pub fn train_tokenizer(
    corpus: &[AudioBuffer],
    mut state: TrainState,
    options: &TrainOptions,
    mut on_step: impl FnMut(&TrainRecord),
) -> Result<TrainState, TokenizerError> {
    if corpus.is_empty() || corpus.iter().all(AudioBuffer::is_empty) {
        return Err(TokenizerError::EmptyCorpus);
    }
    let m = &state.model;
    let plans = Plans::<f32>::new(&m.audio, &m.dims, &m.config.disc_windows)?;
    let last = options.stop_after.map_or(m.config.steps, |s| s.min(m.config.steps));
    let every = m.config.checkpoint_every;
    while state.step < last {
        let record = state.step(corpus, &plans)?;
        on_step(&record);
        if let Some(dir) = &options.checkpoint_dir {
            if every > 0 && state.step % every == 0 {
                state.to_checkpoint().save(dir.join(format!("step_{:06}.ckpt", state.step)))?;
            }
        }
    }
    Ok(state)
}
