//! Sectioned key = value run configuration.
//!
//! One file drives the whole pipeline. A single top-level `seed` feeds every
//! named substream (corpus synthesis, shuffles, sampling); the `[corpus]`
//! section also fixes the vocabulary layout, which the model inherits.
//! Unknown keys are errors, `#` starts a comment, and the serialized form
//! parses back to the same configuration, so the resolved config written next
//! to each run's outputs is sufficient to reproduce it.

use std::fmt::Write as _;
use std::path::Path;

use emotok::corpus::CorpusConfig;
use emotok::error::Error;
use emotok::model::ModelConfig;
use emotok::objectives::LossConfig;
use emotok::training::TrainConfig;
use emotok::Result;

pub const CONFIG_VERSION: u32 = 1;

/// Fully resolved configuration for a run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    /// Fraction of texts (with all their emotions) held out for evaluation.
    pub holdout_frac: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut cfg = PipelineConfig {
            seed: 42,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            holdout_frac: 0.1,
        };
        cfg.set_seed(42);
        cfg
    }
}

impl PipelineConfig {
    /// Route the single seed into every consumer.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.corpus.seed = seed;
        self.train.seed = seed;
    }

    /// The model always speaks the corpus's vocabulary.
    pub fn sync(&mut self) {
        self.model.vocab = self.corpus.vocab;
        self.train.loss = self.loss;
    }

    pub fn validate(&self) -> Result<()> {
        let mut resolved = *self;
        resolved.sync();
        resolved.model.validate()?;
        resolved.train.validate()?;
        resolved.loss.validate()?;
        if !(0.0..1.0).contains(&self.holdout_frac) {
            return Err(Error::Config(format!(
                "holdout_frac {} outside [0, 1)",
                self.holdout_frac
            )));
        }
        Ok(())
    }

    pub fn to_file_string(self) -> String {
        let c = &self.corpus;
        let v = &c.vocab;
        let m = &self.model;
        let l = &self.loss;
        let t = &self.train;
        let mut out = String::new();
        let _ = writeln!(out, "# emotok run config v{CONFIG_VERSION}");
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "\n[corpus]");
        let _ = writeln!(out, "per_emotion = {}", c.per_emotion);
        let _ = writeln!(out, "p_noise = {}", c.p_noise);
        let _ = writeln!(out, "speakers = {}", c.speakers);
        let _ = writeln!(out, "text_len_min = {}", c.text_len_min);
        let _ = writeln!(out, "text_len_max = {}", c.text_len_max);
        let _ = writeln!(out, "text_size = {}", v.text_size);
        let _ = writeln!(out, "content_levels = {}", v.content_levels);
        let _ = writeln!(out, "prosody_levels = {}", v.prosody_levels);
        let _ = writeln!(out, "speaker_slots = {}", v.speaker_slots);
        let _ = writeln!(out, "\n[model]");
        let _ = writeln!(out, "d_model = {}", m.d_model);
        let _ = writeln!(out, "n_heads = {}", m.n_heads);
        let _ = writeln!(out, "n_layers = {}", m.n_layers);
        let _ = writeln!(out, "ff_mult = {}", m.ff_mult);
        let _ = writeln!(out, "max_len = {}", m.max_len);
        let _ = writeln!(out, "\n[loss]");
        let _ = writeln!(out, "beta = {}", l.beta);
        let _ = writeln!(out, "alpha = {}", l.alpha);
        let _ = writeln!(out, "gamma = {}", l.gamma);
        let _ = writeln!(out, "theta = {}", l.theta);
        let _ = writeln!(out, "epsilon_smooth = {}", l.epsilon_smooth);
        let _ = writeln!(out, "\n[train]");
        let _ = writeln!(out, "sft_epochs = {}", t.sft_epochs);
        let _ = writeln!(out, "dpo_epochs = {}", t.dpo_epochs);
        let _ = writeln!(out, "batch_size = {}", t.batch_size);
        let _ = writeln!(out, "sft_batch_size = {}", t.sft_batch_size);
        let _ = writeln!(out, "sft_lr = {}", t.sft_lr);
        let _ = writeln!(out, "dpo_lr = {}", t.dpo_lr);
        let _ = writeln!(out, "adam_beta1 = {}", t.adam_beta1);
        let _ = writeln!(out, "adam_beta2 = {}", t.adam_beta2);
        let _ = writeln!(out, "adam_eps = {}", t.adam_eps);
        let _ = writeln!(out, "grad_clip = {}", t.grad_clip);
        let _ = writeln!(out, "\n[eval]");
        let _ = writeln!(out, "holdout_frac = {}", self.holdout_frac);
        out
    }

    /// Parse a config file over the defaults.
    pub fn from_file(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = PipelineConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                section = name
                    .strip_suffix(']')
                    .ok_or_else(|| {
                        Error::format(
                            path.display().to_string(),
                            format!("line {}: malformed section header", i + 1),
                        )
                    })?
                    .trim()
                    .to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(
                    path.display().to_string(),
                    format!("line {}: expected key = value", i + 1),
                )
            })?;
            cfg.apply(&section, key.trim(), value.trim()).map_err(|e| {
                Error::format(
                    path.display().to_string(),
                    format!("line {}: {e}", i + 1),
                )
            })?;
        }
        // A top-level seed overrides the per-section copies.
        cfg.set_seed(cfg.seed);
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
        }
        match (section, key) {
            ("", "seed") => self.seed = num(key, value)?,
            ("corpus", "per_emotion") => self.corpus.per_emotion = num(key, value)?,
            ("corpus", "p_noise") => self.corpus.p_noise = num(key, value)?,
            ("corpus", "speakers") => self.corpus.speakers = num(key, value)?,
            ("corpus", "text_len_min") => self.corpus.text_len_min = num(key, value)?,
            ("corpus", "text_len_max") => self.corpus.text_len_max = num(key, value)?,
            ("corpus", "text_size") => self.corpus.vocab.text_size = num(key, value)?,
            ("corpus", "content_levels") => self.corpus.vocab.content_levels = num(key, value)?,
            ("corpus", "prosody_levels") => self.corpus.vocab.prosody_levels = num(key, value)?,
            ("corpus", "speaker_slots") => self.corpus.vocab.speaker_slots = num(key, value)?,
            ("model", "d_model") => self.model.d_model = num(key, value)?,
            ("model", "n_heads") => self.model.n_heads = num(key, value)?,
            ("model", "n_layers") => self.model.n_layers = num(key, value)?,
            ("model", "ff_mult") => self.model.ff_mult = num(key, value)?,
            ("model", "max_len") => self.model.max_len = num(key, value)?,
            ("loss", "beta") => self.loss.beta = num(key, value)?,
            ("loss", "alpha") => self.loss.alpha = num(key, value)?,
            ("loss", "gamma") => self.loss.gamma = num(key, value)?,
            ("loss", "theta") => self.loss.theta = num(key, value)?,
            ("loss", "epsilon_smooth") => self.loss.epsilon_smooth = num(key, value)?,
            ("train", "sft_epochs") => self.train.sft_epochs = num(key, value)?,
            ("train", "dpo_epochs") => self.train.dpo_epochs = num(key, value)?,
            ("train", "batch_size") => self.train.batch_size = num(key, value)?,
            ("train", "sft_batch_size") => self.train.sft_batch_size = num(key, value)?,
            ("train", "sft_lr") => self.train.sft_lr = num(key, value)?,
            ("train", "dpo_lr") => self.train.dpo_lr = num(key, value)?,
            ("train", "adam_beta1") => self.train.adam_beta1 = num(key, value)?,
            ("train", "adam_beta2") => self.train.adam_beta2 = num(key, value)?,
            ("train", "adam_eps") => self.train.adam_eps = num(key, value)?,
            ("train", "grad_clip") => self.train.grad_clip = num(key, value)?,
            ("eval", "holdout_frac") => self.holdout_frac = num(key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key '{key}' in section '[{section}]'"
                )))
            }
        }
        Ok(())
    }
}
