//! Command dispatch for the `losatok` binary.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use losatok::checkpoint::Checkpoint;
use losatok::config::{Config, Suite};
use losatok::corpus::{load_corpus, make_corpus, read_manifest, Split};
use losatok::dsp::{load_wav, resample, write_wav, AudioBuffer};
use losatok::evalkit::{
    linear_probe, make_probe_dataset, measure_rtf, mel_distance, pooled_features, stft_distance, FeatureKind,
    FileMetrics, MetricReport, ProbeOptions,
};
use losatok::FeatureSequence;
use losatok::sembo::{history_csv as sembo_history_csv, train_sembo_with, SemboConfig, SemboModel};
use losatok::spectral::{analyze, DEFAULT_ALPHA};
use losatok::tokenizer::{
    history_csv, load_tokenizer, loss_mel_multiscale, train_tokenizer, Frontend, TeacherEncoder, TokenizerModel,
    TrainOptions, TrainState,
};

pub const SEMBO_KIND: &str = "sembo";
pub const LATENT_KIND: &str = "latent";
pub const EVAL_REPORT_VERSION: u32 = 1;
pub const ANALYSIS_REPORT_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "losatok", version, about = "Low-dimensional semantic-acoustic audio tokenizer", arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; defaults apply to absent fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Accept unknown configuration keys.
    #[arg(long, global = true)]
    pub permissive: bool,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress the configuration echo and progress lines on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Effective rank and variance components of teacher features over a corpus.
    Analyze {
        #[arg(long)]
        corpus: PathBuf,
        /// Variance fractions to report component counts for.
        #[arg(long, value_delimiter = ',', default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes the synthetic WAV corpus and its manifest.
    MakeCorpus {
        #[arg(long)]
        out: PathBuf,
        /// Overrides `corpus.hours`.
        #[arg(long)]
        hours: Option<f64>,
    },
    /// Trains the semantic bottleneck on teacher features of a corpus.
    TrainSembo {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss history CSV; defaults to the checkpoint path with a `.csv` extension.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Trains the tokenizer against a frozen semantic bottleneck.
    TrainTokenizer {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        sembo: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
        /// Directory for periodic checkpoints.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Continue from a tokenizer checkpoint written with the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Writes the decoder-input latent of a WAV file.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encodes and decodes a WAV file.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs evaluation suites and writes a JSON report.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Suites to run; defaults to `eval.suites`.
        #[arg(long, value_enum, value_delimiter = ',')]
        suite: Vec<SuiteArg>,
        /// Corpus whose held-out files feed the recon and rtf suites.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SuiteArg {
    Recon,
    Probe,
    Rtf,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Recon => Suite::Recon,
            SuiteArg::Probe => Suite::Probe,
            SuiteArg::Rtf => Suite::Rtf,
        }
    }
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 1 on a runtime error, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            1
        }
    }
}

fn one_line(e: &anyhow::Error) -> String {
    e.chain().map(|c| c.to_string().replace('\n', " ")).collect::<Vec<_>>().join(": ")
}

pub fn load_config(global: &GlobalArgs) -> Result<Config> {
    let mut config = match &global.config {
        Some(p) => Config::from_path(p, !global.permissive)?,
        None => Config::default(),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    Ok(config)
}

macro_rules! progress {
    ($quiet:expr, $($arg:tt)*) => {
        if !$quiet {
            eprintln!($($arg)*);
        }
    };
}

pub fn execute(cli: &Cli) -> Result<()> {
    let config = load_config(&cli.global)?;
    let quiet = cli.global.quiet;
    progress!(quiet, "config: {}", serde_json::to_string(&config)?);
    match &cli.command {
        Command::Analyze { corpus, alpha, out } => cmd_analyze(&config, corpus, *alpha, out),
        Command::MakeCorpus { out, hours } => {
            let mut cc = config.corpus.clone();
            if let Some(h) = hours {
                ensure!(h.is_finite() && *h >= 0.0, "--hours must be a finite value >= 0, got {h}");
                cc.hours = *h;
            }
            let m = make_corpus(config.seed, &cc, out).with_context(|| format!("writing corpus to {}", out.display()))?;
            progress!(quiet, "wrote {} files ({:.1} s) to {}", m.files.len(), m.total_seconds, out.display());
            Ok(())
        }
        Command::TrainSembo { corpus, out, history } => cmd_train_sembo(&config, corpus, out, history.as_deref(), quiet),
        Command::TrainTokenizer { corpus, sembo, out, history, checkpoint_dir, resume } => cmd_train_tokenizer(
            &config,
            corpus,
            sembo,
            out,
            history.as_deref(),
            checkpoint_dir.as_deref(),
            resume.as_deref(),
            quiet,
        ),
        Command::Encode { model, input, out } => cmd_encode(model, input, out),
        Command::Reconstruct { model, input, out } => {
            let state = load_model(model)?;
            let audio = read_input(input, state.model.audio.sample_rate)?;
            let y = state.model.reconstruct(&audio)?;
            write_wav(out, &y).with_context(|| format!("writing {}", out.display()))?;
            Ok(())
        }
        Command::Evaluate { model, suite, corpus, out } => {
            let suites: Vec<Suite> =
                if suite.is_empty() { config.eval.suites.clone() } else { suite.iter().map(|&s| s.into()).collect() };
            cmd_evaluate(&config, model, &suites, corpus.as_deref(), out, quiet)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_input(path: &Path, rate: u32) -> Result<AudioBuffer> {
    let audio = load_wav(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(if audio.sample_rate() == rate { audio } else { resample(&audio, rate) })
}

fn corpus_audio(dir: &Path, split: Option<Split>) -> Result<Vec<AudioBuffer>> {
    let (_, audio) = load_corpus(dir, split).with_context(|| format!("loading corpus {}", dir.display()))?;
    ensure!(!audio.is_empty(), "corpus {} has no {} files", dir.display(), split.map_or("", |s| match s {
        Split::Train => "training ",
        Split::Heldout => "held-out ",
    }));
    Ok(audio)
}

fn teacher_features(config: &Config, audio: &[AudioBuffer]) -> Result<Vec<FeatureSequence>> {
    let frontend = Frontend::new(&config.audio)?;
    let teacher = TeacherEncoder::new(&config.teacher, config.audio.mel_bins, frontend.mel_rate());
    audio.iter().map(|a| Ok(teacher.encode(&frontend.log_mel(a)?)?)).collect()
}

#[derive(Debug, Serialize)]
struct AnalysisOutput {
    format_version: u32,
    source: &'static str,
    #[serde(flatten)]
    report: losatok::spectral::AnalysisReport,
}

fn cmd_analyze(config: &Config, corpus: &Path, alpha: f64, out: &Path) -> Result<()> {
    let audio = corpus_audio(corpus, None)?;
    let feats = teacher_features(config, &audio)?;
    let report = analyze(&feats, &[alpha])?;
    write_json(out, &AnalysisOutput { format_version: ANALYSIS_REPORT_VERSION, source: "teacher", report })
}

fn sembo_echo(config: &Config) -> Value {
    json!({
        "seed": config.seed,
        "audio": config.audio,
        "teacher": config.teacher,
        "sembo": config.sembo,
    })
}

fn cmd_train_sembo(config: &Config, corpus: &Path, out: &Path, history: Option<&Path>, quiet: bool) -> Result<()> {
    let audio = corpus_audio(corpus, Some(Split::Train))?;
    let feats = teacher_features(config, &audio)?;
    let every = (config.sembo.steps / 10).max(1);
    let run = train_sembo_with(&feats, &config.sembo, config.seed, |r| {
        if r.step % every == 0 {
            progress!(quiet, "sembo step {} recon {:.5} tr {:.5} lr {:.2e}", r.step, r.loss_recon, r.loss_tr, r.lr);
        }
    })?;
    let mut ck = Checkpoint::new(SEMBO_KIND, config.sembo.steps, sembo_echo(config));
    ck.put_store("sembo", &run.model.params);
    ck.put_optimizer("opt", &run.optimizer);
    ck.save(out)?;
    let history = history.map_or_else(|| out.with_extension("csv"), Path::to_path_buf);
    write_text(&history, &sembo_history_csv(&run.history))
}

/// Loads a semantic bottleneck checkpoint and checks it against the run configuration.
pub fn load_sembo(path: &Path, config: &Config) -> Result<SemboModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading semantic bottleneck {}", path.display()))?;
    ck.expect_kind(SEMBO_KIND).with_context(|| format!("loading semantic bottleneck {}", path.display()))?;
    let echo = &ck.config;
    let want = sembo_echo(config);
    for key in ["audio", "teacher"] {
        ensure!(
            echo.get(key) == want.get(key),
            "semantic bottleneck {} was trained with a different {key} configuration",
            path.display()
        );
    }
    let stored: SemboConfig = serde_json::from_value(echo.get("sembo").cloned().unwrap_or(Value::Null))
        .with_context(|| format!("reading configuration echo of {}", path.display()))?;
    let cfg = SemboConfig { d_high: config.teacher.d_high, ..stored };
    Ok(SemboModel::from_params(&cfg, ck.take_store("sembo"))?)
}

pub fn load_model(path: &Path) -> Result<TrainState> {
    let ck = Checkpoint::load(path)?;
    load_tokenizer(&ck).with_context(|| format!("loading tokenizer {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_tokenizer(
    config: &Config,
    corpus: &Path,
    sembo: &Path,
    out: &Path,
    history: Option<&Path>,
    checkpoint_dir: Option<&Path>,
    resume: Option<&Path>,
    quiet: bool,
) -> Result<()> {
    let audio = corpus_audio(corpus, Some(Split::Train))?;
    let sembo = load_sembo(sembo, config)?;
    if config.kl_sweep.is_none() {
        return train_one(config, &audio, sembo, out, history, checkpoint_dir, resume, quiet);
    }
    // one run per KL weight; `--out` names a directory
    ensure!(resume.is_none(), "--resume cannot be combined with kl_sweep");
    ensure!(history.is_none(), "--history cannot be combined with kl_sweep; histories go next to each checkpoint");
    for run in config.sweep_configs() {
        let name = sweep_name(run.tokenizer.weights.kl);
        progress!(quiet, "kl sweep: lambda_kl = {}", run.tokenizer.weights.kl);
        let ckpt_dir = checkpoint_dir.map(|d| d.join(&name));
        let target = out.join(format!("{name}.ckpt"));
        train_one(&run, &audio, sembo.clone(), &target, None, ckpt_dir.as_deref(), None, quiet)?;
    }
    Ok(())
}

/// File stem of one KL sweep run, e.g. `kl_0.001`.
pub fn sweep_name(kl: f64) -> String {
    format!("kl_{kl}")
}

#[allow(clippy::too_many_arguments)]
fn train_one(
    config: &Config,
    audio: &[AudioBuffer],
    sembo: SemboModel,
    out: &Path,
    history: Option<&Path>,
    checkpoint_dir: Option<&Path>,
    resume: Option<&Path>,
    quiet: bool,
) -> Result<()> {
    let fresh = TrainState::new(
        TokenizerModel::new(&config.audio, &config.teacher, sembo, &config.tokenizer, config.seed)?,
        config.seed,
    );
    let state = match resume {
        None => fresh,
        Some(path) => {
            let resumed = load_model(path)?;
            if resumed.config_echo() != fresh.config_echo() {
                bail!("checkpoint {} is incompatible with the configuration", path.display());
            }
            if resumed.model.sembo != fresh.model.sembo {
                bail!("checkpoint {} holds a different semantic bottleneck", path.display());
            }
            resumed
        }
    };
    let options = TrainOptions { checkpoint_dir: checkpoint_dir.map(Path::to_path_buf), stop_after: None };
    let every = (config.tokenizer.steps / 20).max(1);
    let done = train_tokenizer(audio, state, &options, |r| {
        if r.step % every == 0 {
            let l = &r.losses;
            progress!(quiet, "tokenizer step {} mel {:.4} sem {:.4}/{:.4} kl {:.3} fm {:.4} adv {:.4} d {:.4}",
                r.step, l.mel, l.l_h, l.l_l, l.kl, l.fm, l.adv, l.d_loss);
        }
    })?;
    done.to_checkpoint().save(out)?;
    let history = history.map_or_else(|| out.with_extension("csv"), Path::to_path_buf);
    write_text(&history, &history_csv(&done.history))
}

fn cmd_encode(model: &Path, input: &Path, out: &Path) -> Result<()> {
    let state = load_model(model)?;
    let audio = read_input(input, state.model.audio.sample_rate)?;
    let enc = state.model.encode_audio(&audio)?;
    let mut ck = Checkpoint::new(LATENT_KIND, state.step, state.config_echo());
    ck.put("latent", enc.latent.to_tensor());
    ck.put("z_uni", enc.z_uni.to_tensor());
    ck.meta.insert("frame_rate".into(), json!(enc.latent.frame_rate()));
    ck.meta.insert("samples".into(), json!(audio.len()));
    ck.meta.insert("topology".into(), json!(state.model.dims.topology));
    ck.save(out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    format_version: u32,
    model_step: u64,
    seed: u64,
    suites: BTreeMap<String, MetricReport>,
}

fn cmd_evaluate(config: &Config, model: &Path, suites: &[Suite], corpus: Option<&Path>, out: &Path, quiet: bool) -> Result<()> {
    let state = load_model(model)?;
    let m = &state.model;
    let echo = state.config_echo();
    let mut reports = BTreeMap::new();
    let heldout = |what: Suite| -> Result<(Vec<String>, Vec<AudioBuffer>)> {
        let dir = corpus.with_context(|| format!("suite {what} needs --corpus"))?;
        let names = read_manifest(dir)?.files.into_iter().filter(|f| f.split == Split::Heldout).map(|f| f.file).collect();
        Ok((names, corpus_audio(dir, Some(Split::Heldout))?))
    };
    for &suite in suites {
        progress!(quiet, "evaluating {suite}");
        let report = match suite {
            Suite::Recon => {
                let (names, audio) = heldout(suite)?;
                let mut per_file = Vec::new();
                for (name, x) in names.into_iter().zip(&audio) {
                    let y = m.reconstruct(x)?;
                    let values = BTreeMap::from([
                        ("mel_distance".to_string(), mel_distance(x, &y)),
                        ("stft_distance".to_string(), stft_distance(x, &y)),
                        ("mel_loss".to_string(), loss_mel_multiscale(x, &y)?),
                    ]);
                    per_file.push(FileMetrics { file: name, values });
                }
                MetricReport::new("recon", config.seed, echo.clone(), per_file)
            }
            Suite::Probe => probe_report(config, m, echo.clone())?,
            Suite::Rtf => {
                let (names, audio) = heldout(suite)?;
                let rtf = measure_rtf(m, &audio, config.eval.rtf_warmup)?;
                let per_file = names
                    .into_iter()
                    .zip(&rtf.per_file)
                    .map(|(file, &v)| FileMetrics { file, values: BTreeMap::from([("rtf".to_string(), v)]) })
                    .collect();
                let mut r = MetricReport::new("rtf", config.seed, echo.clone(), per_file);
                r.summary.insert("warmup_runs".into(), json!(rtf.warmup_runs));
                r.summary.insert("threads".into(), json!(1));
                r
            }
        };
        reports.insert(suite.to_string(), report);
    }
    write_json(out, &EvaluationReport { format_version: EVAL_REPORT_VERSION, model_step: state.step, seed: config.seed, suites: reports })
}

fn probe_report(config: &Config, model: &TokenizerModel, echo: Value) -> Result<MetricReport> {
    let ev = &config.eval;
    let data = make_probe_dataset(config.seed, ev.probe_classes, ev.probe_items_per_class)?;
    let opts = ProbeOptions { steps: ev.probe_steps, optimizer: ev.probe_optimizer };
    let kinds = [("unified", FeatureKind::Unified), ("acoustic", FeatureKind::Acoustic), ("semantic", FeatureKind::Semantic)];
    let mut per_kind = Vec::new();
    for (name, kind) in kinds {
        let feats = data.items.iter().map(|(a, _)| pooled_features(model, a, kind)).collect::<Result<Vec<_>, _>>()?;
        let result = linear_probe(&feats, &data, None, &opts)?;
        per_kind.push((name, feats, result));
    }
    let mut summary = BTreeMap::new();
    for (name, _, r) in &per_kind {
        summary.insert(format!("{name}_train_accuracy"), json!(r.train_accuracy));
    }
    summary.insert("chance".into(), json!(1.0 / data.classes as f64));
    summary.insert("test_items".into(), json!(data.test.len()));
    // per-item correctness, so each aggregate is a test accuracy
    let per_file = data
        .test
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            let values = per_kind
                .iter()
                .map(|(name, _, r)| (format!("{name}_correct"), if r.predictions[j] == data.items[i].1 { 1.0 } else { 0.0 }))
                .collect();
            FileMetrics { file: format!("probe_{i:04}_class{}", data.items[i].1), values }
        })
        .collect();
    let mut report = MetricReport::new("probe", config.seed, echo, per_file);
    report.summary = summary;
    Ok(report)
}
