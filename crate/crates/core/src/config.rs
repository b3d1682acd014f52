//! Run configuration: JSON parsing with defaults, strict unknown-key
//! detection and aggregated validation.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::grad::OptimizerSettings;
use crate::sembo::SemboConfig;
use crate::tokenizer::{TeacherConfig, TokenizerConfig};

/// The KL weights a sweep may contain.
pub const KL_SWEEP_GRID: [f64; 4] = [0.0, 1e-4, 1e-3, 1e-2];

/// Front-end analysis shared by the teacher and the acoustic encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub window_size: usize,
    pub hop: usize,
    pub mel_bins: usize,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self { sample_rate: 16_000, window_size: 512, hop: 160, mel_bins: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Recon,
    Probe,
    Rtf,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Recon => "recon",
            Suite::Probe => "probe",
            Suite::Rtf => "rtf",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub suites: Vec<Suite>,
    pub probe_classes: usize,
    pub probe_items_per_class: usize,
    pub probe_steps: u64,
    pub probe_optimizer: OptimizerSettings,
    /// Untimed runs before RTF measurement.
    pub rtf_warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            suites: vec![Suite::Recon, Suite::Probe, Suite::Rtf],
            probe_classes: 4,
            probe_items_per_class: 25,
            probe_steps: 2000,
            probe_optimizer: OptimizerSettings {
                base_lr: 1e-2,
                min_lr: 1e-4,
                warmup_steps: 100,
                weight_decay: 1e-4,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            rtf_warmup: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub hours: f64,
    pub file_seconds: f64,
    /// Speech-like, music-like and audio-like shares.
    pub proportions: [f64; 3],
    /// Every n-th file is held out from training.
    pub holdout_every: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { hours: 0.25, file_seconds: 4.0, proportions: [0.346, 0.286, 0.368], holdout_every: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub threads: usize,
    #[serde(flatten)]
    pub audio: AudioConfig,
    pub teacher: TeacherConfig,
    pub sembo: SemboConfig,
    pub tokenizer: TokenizerConfig,
    pub eval: EvalConfig,
    pub corpus: CorpusConfig,
    /// KL weights to sweep; each entry must lie on [`KL_SWEEP_GRID`].
    pub kl_sweep: Option<Vec<f64>>,
}

impl Default for Config {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            threads: 1,
            audio: AudioConfig::default(),
            teacher: TeacherConfig::default(),
            sembo: SemboConfig::default(),
            tokenizer: TokenizerConfig::default(),
            eval: EvalConfig::default(),
            corpus: CorpusConfig::default(),
            kl_sweep: None,
        };
        c.sync();
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config is not valid JSON: {0}")]
    Json(#[source] serde_json::Error),
    #[error("config has unknown keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("invalid config: {}", join(.0))]
    Invalid(Vec<FieldError>),
}

fn join(errors: &[FieldError]) -> String {
    errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl Config {
    pub fn from_path(path: impl AsRef<Path>, strict: bool) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text, strict)
    }

    /// Parses JSON text; an empty document counts as `{}`.
    pub fn from_json(text: &str, strict: bool) -> Result<Self, ConfigError> {
        let input: Value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(text).map_err(ConfigError::Json)?
        };
        let mut config: Config = serde_json::from_value(input.clone()).map_err(ConfigError::Json)?;
        config.sync();
        if strict {
            let known = serde_json::to_value(&config).expect("config serializes");
            let mut unknown = Vec::new();
            unknown_keys(&input, &known, "", &mut unknown);
            if !unknown.is_empty() {
                return Err(ConfigError::UnknownKeys(unknown));
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Propagates values shared between sections.
    fn sync(&mut self) {
        self.sembo.d_high = self.teacher.d_high;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut e = |path: &str, message: String| errs.push(FieldError { path: path.to_string(), message });
        let positive = |v: usize| if v == 0 { Some("must be positive".to_string()) } else { None };
        let check = |path: &str, msg: Option<String>, e: &mut dyn FnMut(&str, String)| {
            if let Some(m) = msg {
                e(path, m);
            }
        };
        let non_negative = |v: f64| {
            if !v.is_finite() || v < 0.0 {
                Some(format!("must be a finite value >= 0, got {v}"))
            } else {
                None
            }
        };
        let strictly_positive = |v: f64| {
            if !v.is_finite() || v <= 0.0 {
                Some(format!("must be a finite value > 0, got {v}"))
            } else {
                None
            }
        };

        check("threads", positive(self.threads), &mut e);
        check("sample_rate", positive(self.audio.sample_rate as usize), &mut e);
        check("window_size", positive(self.audio.window_size), &mut e);
        check("hop", positive(self.audio.hop), &mut e);
        check("mel_bins", positive(self.audio.mel_bins), &mut e);
        if self.audio.hop > self.audio.window_size {
            e("hop", format!("must not exceed window_size ({})", self.audio.window_size));
        }
        check("teacher.d_high", positive(self.teacher.d_high), &mut e);

        let s = &self.sembo;
        check("sembo.hidden", positive(s.hidden), &mut e);
        check("sembo.d_low", positive(s.d_low), &mut e);
        if s.d_low >= self.teacher.d_high {
            e("sembo.d_low", format!("must be below teacher.d_high ({})", self.teacher.d_high));
        }
        check("sembo.lambda_recon", non_negative(s.lambda_recon), &mut e);
        check("sembo.batch", positive(s.batch), &mut e);
        check("sembo.crop_frames", positive(s.crop_frames), &mut e);
        optimizer_errors("sembo.optimizer", &s.optimizer, &mut e);

        let t = &self.tokenizer;
        check("tokenizer.d", positive(t.d), &mut e);
        if t.d != s.d_low {
            e("tokenizer.d", format!("must equal sembo.d_low ({})", s.d_low));
        }
        check("tokenizer.decoder_channels", positive(t.decoder_channels), &mut e);
        check("tokenizer.decoder_blocks", positive(t.decoder_blocks), &mut e);
        if t.decoder_kernel % 2 == 0 {
            e("tokenizer.decoder_kernel", "must be odd".into());
        }
        if t.disc_windows.is_empty() {
            e("tokenizer.disc_windows", "must list at least one window".into());
        }
        for (i, &w) in t.disc_windows.iter().enumerate() {
            if w < 8 || w % 4 != 0 {
                e(&format!("tokenizer.disc_windows[{i}]"), format!("must be a multiple of 4 and at least 8, got {w}"));
            }
        }
        check("tokenizer.disc_channels", positive(t.disc_channels), &mut e);
        let w = &t.weights;
        for (name, v) in [("lambda_mel", w.mel), ("lambda_sem", w.sem), ("lambda_kl", w.kl), ("lambda_fm", w.fm), ("lambda_adv", w.adv)] {
            check(&format!("tokenizer.{name}"), non_negative(v), &mut e);
        }
        check("tokenizer.batch", positive(t.batch), &mut e);
        check("tokenizer.crop_seconds", strictly_positive(t.crop_seconds), &mut e);
        optimizer_errors("tokenizer.optimizer", &t.optimizer, &mut e);

        let ev = &self.eval;
        if ev.probe_classes < 2 {
            e("eval.probe_classes", "must be at least 2".into());
        }
        if ev.probe_items_per_class < 5 {
            e("eval.probe_items_per_class", "must be at least 5 for an 80/20 split".into());
        }
        optimizer_errors("eval.probe_optimizer", &ev.probe_optimizer, &mut e);

        let c = &self.corpus;
        check("corpus.hours", non_negative(c.hours), &mut e);
        check("corpus.file_seconds", strictly_positive(c.file_seconds), &mut e);
        for (i, &p) in c.proportions.iter().enumerate() {
            check(&format!("corpus.proportions[{i}]"), non_negative(p), &mut e);
        }
        if c.proportions.iter().sum::<f64>() <= 0.0 {
            e("corpus.proportions", "must not all be zero".into());
        }
        check("corpus.holdout_every", positive(c.holdout_every), &mut e);

        if let Some(sweep) = &self.kl_sweep {
            if sweep.is_empty() {
                e("kl_sweep", "must not be empty".into());
            }
            for (i, v) in sweep.iter().enumerate() {
                if !KL_SWEEP_GRID.contains(v) {
                    e(&format!("kl_sweep[{i}]"), format!("{v} is not one of {KL_SWEEP_GRID:?}"));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    /// One configuration per swept KL weight; just `self` without a sweep.
    pub fn sweep_configs(&self) -> Vec<Config> {
        match &self.kl_sweep {
            None => vec![self.clone()],
            Some(values) => values
                .iter()
                .map(|&kl| {
                    let mut c = self.clone();
                    c.tokenizer.weights.kl = kl;
                    c.kl_sweep = None;
                    c
                })
                .collect(),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn optimizer_errors(prefix: &str, o: &OptimizerSettings, e: &mut dyn FnMut(&str, String)) {
    for (name, v) in [("base_lr", o.base_lr), ("min_lr", o.min_lr), ("weight_decay", o.weight_decay), ("eps", o.eps)] {
        if !v.is_finite() || v < 0.0 {
            e(&format!("{prefix}.{name}"), format!("must be a finite value >= 0, got {v}"));
        }
    }
    for (name, v) in [("beta1", o.beta1), ("beta2", o.beta2)] {
        if !(0.0..1.0).contains(&v) {
            e(&format!("{prefix}.{name}"), format!("must lie in [0, 1), got {v}"));
        }
    }
}

fn unknown_keys(input: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(inp), Value::Object(kn)) = (input, known) else {
        return;
    };
    for (k, v) in inp {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match kn.get(k) {
            None => out.push(path),
            Some(kv) => unknown_keys(v, kv, &path, out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{KlMode, Topology};

    #[test]
    fn empty_document_gives_defaults() {
        let a = Config::from_json("{}", true).unwrap();
        let b = Config::from_json("", true).unwrap();
        assert_eq!(a, Config::default());
        assert_eq!(a, b);
        let w = a.tokenizer.weights;
        assert_eq!((w.mel, w.sem, w.kl, w.fm, w.adv), (45.0, 45.0, 0.01, 1.0, 1.0));
        assert_eq!(a.sembo.lambda_recon, 1e3);
        assert_eq!((a.teacher.d_high, a.sembo.d_low, a.tokenizer.d), (64, 16, 16));
    }

    #[test]
    fn kl_override_keeps_other_weights() {
        let c = Config::from_json(r#"{"tokenizer": {"lambda_kl": 0.001}}"#, true).unwrap();
        assert_eq!(c.tokenizer.weights.kl, 1e-3);
        assert_eq!(c.tokenizer.weights.mel, 45.0);
        assert_eq!(c.tokenizer.topology(), Topology::Vae);
    }

    #[test]
    fn negative_weight_names_field() {
        let err = Config::from_json(r#"{"tokenizer": {"lambda_mel": -1}}"#, true).unwrap_err();
        assert!(err.to_string().contains("tokenizer.lambda_mel"), "{err}");
    }

    #[test]
    fn errors_are_aggregated() {
        let err = Config::from_json(r#"{"threads": 0, "sembo": {"batch": 0}, "tokenizer": {"lambda_fm": -2}}"#, true)
            .unwrap_err();
        let ConfigError::Invalid(list) = err else { panic!("expected validation errors") };
        let paths: Vec<_> = list.iter().map(|f| f.path.as_str()).collect();
        assert!(paths.contains(&"threads") && paths.contains(&"sembo.batch") && paths.contains(&"tokenizer.lambda_fm"));
    }

    #[test]
    fn strict_mode_rejects_unknown_keys() {
        let text = r#"{"tokenizer": {"lambda_foo": 1}, "bogus": 2, "sembo": {"d_high": 32}}"#;
        let ConfigError::UnknownKeys(keys) = Config::from_json(text, true).unwrap_err() else { panic!() };
        assert_eq!(keys, vec!["bogus", "sembo.d_high", "tokenizer.lambda_foo"]);
        assert!(Config::from_json(text, false).is_ok());
    }

    #[test]
    fn sembo_width_follows_teacher() {
        let c = Config::from_json(r#"{"teacher": {"d_high": 32}}"#, true).unwrap();
        assert_eq!(c.sembo.d_high, 32);
    }

    #[test]
    fn autoencoder_needs_both_switches() {
        let ae = Config::from_json(r#"{"tokenizer": {"lambda_kl": 0, "kl_mode": "deterministic"}}"#, true).unwrap();
        assert_eq!(ae.tokenizer.topology(), Topology::Autoencoder);
        let only_kl = Config::from_json(r#"{"tokenizer": {"lambda_kl": 0}}"#, true).unwrap();
        assert_eq!(only_kl.tokenizer.topology(), Topology::Vae);
        let only_mode = Config::from_json(r#"{"tokenizer": {"kl_mode": "deterministic"}}"#, true).unwrap();
        assert_eq!(only_mode.tokenizer.kl_mode, KlMode::Deterministic);
        assert_eq!(only_mode.tokenizer.topology(), Topology::Vae);
    }

    #[test]
    fn sweep_accepts_exactly_the_grid() {
        let c = Config::from_json(r#"{"kl_sweep": [0, 0.0001, 0.001, 0.01]}"#, true).unwrap();
        let kls: Vec<f64> = c.sweep_configs().iter().map(|c| c.tokenizer.weights.kl).collect();
        assert_eq!(kls, KL_SWEEP_GRID.to_vec());
        for bad in ["0.1", "0.002", "-0.001", "1e-5"] {
            let text = format!(r#"{{"kl_sweep": [0, {bad}]}}"#);
            let err = Config::from_json(&text, true).unwrap_err();
            assert!(err.to_string().contains("kl_sweep[1]"), "{bad}: {err}");
        }
    }

    #[test]
    fn malformed_json_is_reported() {
        assert!(matches!(Config::from_json("{", true), Err(ConfigError::Json(_))));
        assert!(matches!(Config::from_json(r#"{"seed": "x"}"#, true), Err(ConfigError::Json(_))));
    }

    #[test]
    fn echo_round_trips() {
        let c = Config::from_json(r#"{"seed": 9, "tokenizer": {"steps": 10}}"#, true).unwrap();
        let again = Config::from_json(&c.to_json_pretty(), true).unwrap();
        assert_eq!(c, again);
    }
}
