use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{config_error, PipelineError, Result};
use crate::datagen::{CorpusConfig, TASKS};
use crate::encoder::EncoderConfig;
use crate::popt::PoptConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Lengths mixed by the augmented (TSAP) model.
    pub tsap_lengths_s: Vec<f64>,
    /// Lengths the augmented model must never see.
    pub holdout_lengths_s: Vec<f64>,
    /// One single-length baseline per entry.
    pub fixed_lengths_s: Vec<f64>,
    /// Spacing between consecutive pretraining windows.
    pub gap_s: f64,
    /// Step budget of a single-length model; the augmented model gets twice this.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Validation cadence in steps.
    pub val_every: usize,
    /// Trailing fraction of each pretraining session held out for validation.
    pub val_fraction: f64,
    /// Validation examples per length.
    pub val_examples: usize,
    /// Channels drawn per pretraining ensemble.
    pub ensemble_channels: usize,
    /// Leading sessions of each subject used for pretraining; the rest are downstream.
    pub pretrain_sessions: usize,
    /// Probability that an example is a corrupted ensemble.
    pub negative_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            tsap_lengths_s: vec![1.0, 2.0, 4.0, 5.0],
            holdout_lengths_s: vec![3.0],
            fixed_lengths_s: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            gap_s: 0.5,
            steps: 20_000,
            batch_size: 16,
            lr: 1e-4,
            val_every: 250,
            val_fraction: 0.2,
            val_examples: 64,
            ensemble_channels: 16,
            pretrain_sessions: 1,
            negative_fraction: 0.5,
        }
    }
}

impl PretrainConfig {
    pub fn tsap_steps(&self) -> usize {
        2 * self.steps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub tasks: Vec<String>,
    pub eval_lengths_s: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Fixed channel subset size per subject.
    pub channels_per_subject: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The downstream session is cut into this many equal time blocks...
    pub n_blocks: usize,
    /// ...of which this many go to training and this many to validation
    /// (the rest are test), reassigned per seed.
    pub train_blocks: usize,
    pub val_blocks: usize,
    /// Train only the decode head on a frozen body.
    pub probe: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            tasks: TASKS.iter().map(|t| t.to_string()).collect(),
            eval_lengths_s: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            seeds: vec![0, 1, 2, 3, 4],
            channels_per_subject: 16,
            epochs: 20,
            batch_size: 16,
            lr: 1e-4,
            n_blocks: 10,
            train_blocks: 6,
            val_blocks: 2,
            probe: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub task: String,
    pub subject_id: u32,
    pub samples_per_length: usize,
    pub lengths_s: Vec<f64>,
    pub k: usize,
    /// Fixed-length model compared against the augmented one on CLS clustering.
    pub reference_length_s: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            task: TASKS[0].to_string(),
            subject_id: 0,
            samples_per_length: 100,
            lengths_s: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            k: 5,
            reference_length_s: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every other seed derives from it.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub model: PoptConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            corpus: CorpusConfig::default(),
            encoder: EncoderConfig::default(),
            model: PoptConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

fn positive_lengths(field: &str, v: &[f64], max: f64) -> Result<()> {
    if v.is_empty() {
        return Err(config_error(field, "must not be empty"));
    }
    for &l in v {
        if !(l > 0.0 && l <= max) {
            return Err(config_error(field, format!("length {l} outside (0, {max}]")));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Two subjects, eight channels, two lengths, 200 steps.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.corpus.n_subjects = 2;
        c.corpus.n_channels = 8;
        c.corpus.duration_s = 240.0;
        c.model = PoptConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ff_dim: 32,
            coord_hidden: 16,
            ..PoptConfig::default()
        };
        c.pretrain.tsap_lengths_s = vec![1.0, 2.0];
        c.pretrain.holdout_lengths_s = vec![];
        c.pretrain.fixed_lengths_s = vec![1.0, 2.0];
        c.pretrain.steps = 200;
        c.pretrain.val_every = 50;
        c.pretrain.val_examples = 16;
        c.pretrain.ensemble_channels = 8;
        c.pretrain.batch_size = 8;
        c.finetune.tasks = vec![TASKS[0].to_string()];
        c.finetune.eval_lengths_s = vec![1.0, 2.0];
        c.finetune.seeds = vec![0, 1];
        c.finetune.channels_per_subject = 8;
        c.finetune.epochs = 3;
        c.analysis.lengths_s = vec![1.0, 2.0];
        c.analysis.k = 2;
        c.analysis.samples_per_length = 20;
        c.analysis.reference_length_s = 2.0;
        c
    }

    /// The full grid (4 subjects, 32 channels, five seeds) with the model and
    /// step budgets shrunk to fit a single core in well under an hour.
    pub fn acceptance() -> Self {
        let mut c = Self::default();
        c.model = PoptConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            ff_dim: 128,
            coord_hidden: 32,
            ..PoptConfig::default()
        };
        // More pretraining sessions so the long-window models, which get a
        // fifth of the windows per session, still see a few thousand.
        c.corpus.sessions_per_subject = 5;
        c.pretrain.pretrain_sessions = 4;
        c.pretrain.steps = 5000;
        c.pretrain.lr = 1e-3;
        c.pretrain.val_every = 250;
        c.finetune.tasks = vec![TASKS[0].to_string()];
        c.finetune.epochs = 10;
        c.finetune.lr = 1e-3;
        c
    }

    pub fn models(&self) -> Vec<ModelSpec> {
        let mut m = vec![ModelSpec::NonPretrained];
        m.extend(self.pretrain.fixed_lengths_s.iter().map(|&l| ModelSpec::Fixed(l)));
        m.push(ModelSpec::Tsap);
        m
    }

    pub fn pretrain_lengths(&self, spec: ModelSpec) -> Vec<f64> {
        match spec {
            ModelSpec::NonPretrained => vec![],
            ModelSpec::Fixed(l) => vec![l],
            ModelSpec::Tsap => self.pretrain.tsap_lengths_s.clone(),
        }
    }

    pub fn pretrain_steps(&self, spec: ModelSpec) -> usize {
        match spec {
            ModelSpec::NonPretrained => 0,
            ModelSpec::Fixed(_) => self.pretrain.steps,
            ModelSpec::Tsap => self.pretrain.tsap_steps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.encoder.validate()?;
        self.model.validate()?;
        let c = &self.corpus;
        let p = &self.pretrain;
        let f = &self.finetune;
        let a = &self.analysis;
        if self.encoder.sample_rate_hz != c.sample_rate_hz {
            return Err(config_error("encoder.sample_rate_hz", "must equal corpus.sample_rate_hz"));
        }
        if self.model.h_dim != self.encoder.h_dim {
            return Err(config_error("model.h_dim", "must equal encoder.h_dim"));
        }
        let max = c.max_interval_s;
        positive_lengths("pretrain.tsap_lengths_s", &p.tsap_lengths_s, max)?;
        positive_lengths("pretrain.fixed_lengths_s", &p.fixed_lengths_s, max)?;
        positive_lengths("finetune.eval_lengths_s", &f.eval_lengths_s, max)?;
        positive_lengths("analysis.lengths_s", &a.lengths_s, max)?;
        if let Some(h) = p.holdout_lengths_s.iter().find(|h| p.tsap_lengths_s.contains(h)) {
            return Err(config_error(
                "pretrain.holdout_lengths_s",
                format!("{h} is also a TSAP length"),
            ));
        }
        for l in &f.eval_lengths_s {
            if !p.fixed_lengths_s.contains(l) {
                return Err(config_error(
                    "finetune.eval_lengths_s",
                    format!("{l} has no matched fixed-length model"),
                ));
            }
        }
        if p.steps == 0 || p.batch_size == 0 || p.val_every == 0 || p.val_examples == 0 {
            return Err(config_error("pretrain", "steps, batch_size, val_every and val_examples must be positive"));
        }
        if !(p.lr > 0.0) || !(f.lr > 0.0) {
            return Err(config_error("lr", "learning rates must be positive"));
        }
        if !(p.gap_s >= 0.0) {
            return Err(config_error("pretrain.gap_s", "must be non-negative"));
        }
        if !(p.val_fraction > 0.0 && p.val_fraction < 0.5) {
            return Err(config_error("pretrain.val_fraction", "must lie in (0, 0.5)"));
        }
        if !(p.negative_fraction > 0.0 && p.negative_fraction < 1.0) {
            return Err(config_error("pretrain.negative_fraction", "must lie in (0, 1)"));
        }
        if p.ensemble_channels == 0 || p.ensemble_channels > c.n_channels {
            return Err(config_error("pretrain.ensemble_channels", "must lie in 1..=corpus.n_channels"));
        }
        if p.pretrain_sessions == 0 || p.pretrain_sessions >= c.sessions_per_subject {
            return Err(config_error(
                "pretrain.pretrain_sessions",
                "must leave at least one downstream session per subject",
            ));
        }
        if f.tasks.is_empty() {
            return Err(config_error("finetune.tasks", "must not be empty"));
        }
        if let Some(t) = f.tasks.iter().chain([&a.task]).find(|t| !TASKS.contains(&t.as_str())) {
            return Err(config_error("finetune.tasks", format!("unknown task {t:?}")));
        }
        if f.seeds.is_empty() {
            return Err(config_error("finetune.seeds", "must not be empty"));
        }
        if f.channels_per_subject == 0 || f.channels_per_subject > c.n_channels {
            return Err(config_error("finetune.channels_per_subject", "must lie in 1..=corpus.n_channels"));
        }
        if f.epochs == 0 || f.batch_size == 0 {
            return Err(config_error("finetune", "epochs and batch_size must be positive"));
        }
        if f.train_blocks == 0 || f.val_blocks == 0 || f.train_blocks + f.val_blocks >= f.n_blocks {
            return Err(config_error(
                "finetune.n_blocks",
                "need at least one train, one validation and one test block",
            ));
        }
        if c.duration_s / (f.n_blocks as f64) < 2.0 * max {
            return Err(config_error("finetune.n_blocks", "blocks must be at least twice the longest interval"));
        }
        if a.subject_id as usize >= c.n_subjects {
            return Err(config_error("analysis.subject_id", "no such subject"));
        }
        if a.k == 0 || a.samples_per_length == 0 {
            return Err(config_error("analysis", "k and samples_per_length must be positive"));
        }
        if !p.fixed_lengths_s.contains(&a.reference_length_s) {
            return Err(config_error("analysis.reference_length_s", "must be one of the fixed lengths"));
        }
        Ok(())
    }
}

/// One of the compared models.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub enum ModelSpec {
    NonPretrained,
    Fixed(f64),
    Tsap,
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonPretrained => f.write_str("non-pretrained"),
            Self::Fixed(l) => write!(f, "fixed-{l}s"),
            Self::Tsap => f.write_str("tsap"),
        }
    }
}

impl FromStr for ModelSpec {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non-pretrained" => Ok(Self::NonPretrained),
            "tsap" => Ok(Self::Tsap),
            _ => s
                .strip_prefix("fixed-")
                .and_then(|r| r.strip_suffix('s'))
                .and_then(|l| l.parse().ok())
                .map(Self::Fixed)
                .ok_or_else(|| config_error("model", format!("unknown model {s:?}"))),
        }
    }
}

