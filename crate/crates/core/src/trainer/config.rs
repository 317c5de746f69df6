use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::avmodel::ModelConfig;
use crate::error::{Error, Result};
use crate::losses::{LossKind, DEFAULT_BETA, DEFAULT_LAMBDA};
use crate::metrics::UnnaturalDetector;
use crate::prefpipe::PairConfig;
use crate::synthcorpus::CorpusConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Pretrain,
    Align,
    Sft,
    Mrdpo,
    Rebirth,
    Gdpo,
}

impl StageKind {
    pub const ALL: [StageKind; 6] = [
        StageKind::Pretrain,
        StageKind::Align,
        StageKind::Sft,
        StageKind::Mrdpo,
        StageKind::Rebirth,
        StageKind::Gdpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Pretrain => "pretrain",
            StageKind::Align => "align",
            StageKind::Sft => "sft",
            StageKind::Mrdpo => "mrdpo",
            StageKind::Rebirth => "rebirth",
            StageKind::Gdpo => "gdpo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }

    fn is_preference(self) -> bool {
        matches!(self, StageKind::Mrdpo | StageKind::Gdpo)
    }
}

/// How each mrDPO round relates to the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxyMode {
    /// Merge the adapter, refresh the reference and start a new adapter every round.
    LoraProxy,
    /// Keep training one adapter against the reference taken before round 1.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub lambda: f64,
    pub beta: f64,
    pub proxy: ProxyMode,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    /// Fraction of chosen captions rewritten with `#audio:` markers before
    /// training. Only used to provoke degenerate output on purpose.
    pub inject_markers: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-3,
            batch_size: 16,
            loss: LossKind::Sft,
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            proxy: ProxyMode::LoraProxy,
            seed: 0,
            clip: 1.0,
            inject_markers: 0.0,
        }
    }
}

impl StageConfig {
    pub fn supervised(steps: usize, lr: f64, seed: u64) -> Self {
        Self {
            steps,
            lr,
            seed,
            ..Self::default()
        }
    }

    pub fn preference(loss: LossKind, steps: usize, lr: f64, seed: u64) -> Self {
        Self {
            steps,
            lr,
            seed,
            loss,
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self, kind: StageKind) -> Result<()> {
        let name = kind.name();
        if self.steps == 0 {
            return Err(Error::Config(format!("{name}: steps must be positive")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{name}: batch_size must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("{name}: lr must be positive")));
        }
        if !(self.clip >= 0.0) || !(0.0..=1.0).contains(&self.inject_markers) {
            return Err(Error::Config(format!("{name}: clip or inject_markers out of range")));
        }
        let legal = match kind {
            StageKind::Gdpo => self.loss == LossKind::Gdpo,
            k if k.is_preference() => self.loss != LossKind::Sft,
            _ => self.loss == LossKind::Sft,
        };
        if !legal {
            return Err(Error::Config(format!("{name}: loss {:?} is not allowed here", self.loss)));
        }
        if kind.is_preference() && !(self.beta > 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config(format!("{name}: beta must be positive and lambda non-negative")));
        }
        Ok(())
    }
}

/// Everything a pipeline run depends on. Runs are a deterministic function of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub model_seed: u64,
    /// Largest number the tokenizer can express (durations and counts).
    /// The tokenizer has `max_number + 30` entries, which must equal `model.vocab_size`.
    pub max_number: usize,
    pub train_corpus: CorpusConfig,
    pub eval_corpus: CorpusConfig,
    /// Read the training corpus from JSONL instead of generating it.
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    /// Threshold schedule file; the shipped schedule when absent.
    pub thresholds: Option<PathBuf>,
    pub pretrain: StageConfig,
    pub align: StageConfig,
    pub sft: StageConfig,
    pub mrdpo: StageConfig,
    pub rebirth: StageConfig,
    pub gdpo: StageConfig,
    pub rounds: usize,
    /// Stop mrDPO once the held-out unnatural rate exceeds this.
    pub halt_unnatural: f64,
    /// Schedule row used by the post-rebirth round.
    pub post_rebirth_row: usize,
    pub pairs: PairConfig,
    pub detector: UnnaturalDetector,
    pub eval_seed: u64,
    pub max_new_tokens: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let model = ModelConfig {
            vocab_size: 90,
            ..ModelConfig::default()
        };
        Self {
            model,
            model_seed: 7,
            max_number: 60,
            train_corpus: CorpusConfig {
                n_videos: 500,
                seed: 1,
                ..CorpusConfig::default()
            },
            eval_corpus: CorpusConfig {
                n_videos: 100,
                seed: 2,
                ..CorpusConfig::default()
            },
            train_path: None,
            eval_path: None,
            thresholds: None,
            pretrain: StageConfig::supervised(5000, 2e-3, 11),
            align: StageConfig::supervised(600, 2e-3, 12),
            sft: StageConfig::supervised(1000, 1e-3, 13),
            mrdpo: StageConfig::preference(LossKind::Gdpo, 200, 2e-4, 14),
            rebirth: StageConfig::supervised(1000, 1e-3, 15),
            gdpo: StageConfig::preference(LossKind::Gdpo, 200, 2e-4, 16),
            rounds: 6,
            halt_unnatural: 0.10,
            post_rebirth_row: 7,
            pairs: PairConfig {
                seed: 17,
                temperature: 0.7,
                ..PairConfig::default()
            },
            detector: UnnaturalDetector::default(),
            eval_seed: 18,
            max_new_tokens: 40,
        }
    }
}

impl PipelineConfig {
    pub fn stage(&self, kind: StageKind) -> &StageConfig {
        match kind {
            StageKind::Pretrain => &self.pretrain,
            StageKind::Align => &self.align,
            StageKind::Sft => &self.sft,
            StageKind::Mrdpo => &self.mrdpo,
            StageKind::Rebirth => &self.rebirth,
            StageKind::Gdpo => &self.gdpo,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for kind in StageKind::ALL {
            self.stage(kind).validate(kind)?;
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.halt_unnatural) {
            return Err(Error::Config("halt_unnatural must lie in [0, 1]".into()));
        }
        if self.pairs.temperature <= 0.0 {
            return Err(Error::Config("pair sampling needs a positive temperature".into()));
        }
        let longest = self.train_corpus.duration_range.1.max(self.eval_corpus.duration_range.1) as usize;
        if longest > self.max_number {
            return Err(Error::Config(format!(
                "durations up to {longest}s need max_number >= {longest}"
            )));
        }
        for p in [&self.train_path, &self.eval_path, &self.thresholds].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.detector = UnnaturalDetector::new(cfg.detector.patterns.clone(), cfg.detector.repetition_threshold)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}
