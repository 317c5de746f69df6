use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, StageKind};
use super::eval::{evaluate, qa_accuracy, EvalSummary};
use super::stages::{MrdpoOutcome, RebirthLog, StageLog};
use crate::avmodel::ModelState;
use crate::error::{Error, Result};
use crate::metrics::{format_table, CorpusReport};
use crate::prefpipe::{Judge, ThresholdSchedule};
use crate::synthcorpus::{gen_corpus, read_jsonl, EventVocab, PreparedCorpus, Tokenizer};

/// Corpora, tokenizer, judge and schedule shared by every stage of a run.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub tok: Tokenizer,
    pub judge: Judge,
    pub schedule: ThresholdSchedule,
    pub train: PreparedCorpus,
    pub eval: PreparedCorpus,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = EventVocab::default();
        let tok = Tokenizer::new(&vocab, cfg.max_number)?;
        if tok.len() != cfg.model.vocab_size {
            return Err(Error::Config(format!(
                "model vocab_size {} must equal the tokenizer size {}",
                cfg.model.vocab_size,
                tok.len()
            )));
        }
        let schedule = match &cfg.thresholds {
            Some(p) => ThresholdSchedule::load(p)?,
            None => ThresholdSchedule::shipped(),
        };
        if cfg.rounds > schedule.len() || cfg.post_rebirth_row > schedule.len() || cfg.post_rebirth_row == 0 {
            return Err(Error::Config(format!(
                "rounds ({}) and post_rebirth_row ({}) must fit the {}-row threshold schedule",
                cfg.rounds,
                cfg.post_rebirth_row,
                schedule.len()
            )));
        }
        let load = |path: &Option<PathBuf>, c| -> Result<Vec<_>> {
            match path {
                Some(p) => read_jsonl(p),
                None => gen_corpus(c, &vocab),
            }
        };
        let train = PreparedCorpus::new(load(&cfg.train_path, &cfg.train_corpus)?, &cfg.model, cfg.train_corpus.noise)?;
        let eval = PreparedCorpus::new(load(&cfg.eval_path, &cfg.eval_corpus)?, &cfg.model, cfg.eval_corpus.noise)?;
        for v in train.videos.iter().chain(&eval.videos) {
            if v.duration > cfg.max_number as f64 {
                return Err(Error::data(format!("video {} is longer than max_number", v.id)));
            }
        }
        let judge = Judge::new(vocab, cfg.detector.clone());
        Ok(Self {
            cfg,
            tok,
            judge,
            schedule,
            train,
            eval,
        })
    }

    pub fn init_model(&self) -> Result<ModelState> {
        ModelState::init(self.cfg.model.clone(), self.cfg.model_seed)
    }

    pub fn evaluate(&self, model: &ModelState) -> Result<CorpusReport> {
        evaluate(model, &self.tok, &self.judge, &self.eval, self.cfg.eval_seed, self.cfg.max_new_tokens)
    }

    pub fn qa_accuracy(&self, model: &ModelState) -> Result<f64> {
        qa_accuracy(model, &self.tok, &self.eval)
    }

    /// Runs `stages` in canonical order starting from `start` (a fresh model
    /// when absent). Rebirth needs the post-alignment model, taken from this
    /// run or from `aligned`.
    pub fn run(
        &self,
        stages: &[StageKind],
        start: Option<ModelState>,
        aligned: Option<ModelState>,
        dir: Option<&RunDir>,
    ) -> Result<PipelineOutcome> {
        let mut stages = stages.to_vec();
        stages.sort();
        stages.dedup();
        if stages.is_empty() {
            return Err(Error::Config("no stages selected".into()));
        }
        if start.is_none() && stages[0] != StageKind::Pretrain {
            return Err(Error::Config(format!(
                "stage {} needs a checkpoint to resume from",
                stages[0].name()
            )));
        }
        let mut state = match start {
            Some(s) => s,
            None => self.init_model()?,
        };
        let mut aligned = aligned;
        let mut out = PipelineOutcome::default();
        if let Some(d) = dir {
            d.write_text("config.toml", &self.cfg.to_toml()?)?;
        }
        for kind in stages {
            let cfg = self.cfg.stage(kind).clone();
            match kind {
                StageKind::Pretrain => out.stages.push(self.run_pretrain(&mut state, &cfg)?),
                StageKind::Align => {
                    out.stages.push(self.run_alignment(&mut state, &cfg)?);
                    aligned = Some(state.clone());
                }
                StageKind::Sft => out.stages.push(self.run_sft(&mut state, &cfg)?),
                StageKind::Mrdpo => {
                    let m = self.run_mrdpo(&mut state, &cfg, self.cfg.rounds)?;
                    if let Some(d) = dir {
                        for r in &m.rounds {
                            d.write_json(&format!("logs/round-{:02}.json", r.round), r)?;
                        }
                    }
                    out.mrdpo = Some(m);
                }
                StageKind::Rebirth => {
                    let base = match (&aligned, dir) {
                        (Some(a), _) => a.clone(),
                        (None, Some(d)) if d.checkpoint("align").exists() => ModelState::load(&d.checkpoint("align"))?,
                        _ => return Err(Error::Config("rebirth needs the post-alignment checkpoint".into())),
                    };
                    let (reborn, log) = self.run_rebirth(&base, &state, &cfg)?;
                    state = reborn;
                    out.rebirth = Some(log);
                }
                StageKind::Gdpo => {
                    let log = self.run_post_rebirth_gdpo(&mut state, &cfg)?;
                    if let Some(d) = dir {
                        d.write_json(&format!("logs/round-{:02}.json", log.round), &log)?;
                    }
                    out.post_rebirth = Some(log);
                }
            }
            let report = self.evaluate(&state)?;
            let qa = self.qa_accuracy(&state)?;
            log::info!(
                "after {}: global total {:.3}, local total {:.3}, unnatural {:.3}, qa {:.3}",
                kind.name(),
                report.global.total_rate,
                report.local.total_rate,
                report.unnatural_rate,
                qa
            );
            if let Some(d) = dir {
                state.save(&d.checkpoint(kind.name()))?;
                d.write_json(&format!("reports/{}.json", kind.name()), &report)?;
                d.write_text(&format!("reports/{}.txt", kind.name()), &format_table(&report))?;
                if let Some(s) = out.stages.last().filter(|s| s.stage == kind.name()) {
                    d.write_json(&format!("logs/{}.json", kind.name()), s)?;
                }
                if let (StageKind::Rebirth, Some(r)) = (kind, &out.rebirth) {
                    d.write_json("logs/rebirth.json", r)?;
                }
            }
            out.reports.insert(kind.name().into(), EvalSummary::from(&report));
            out.qa.insert(kind.name().into(), qa);
        }
        if let Some(d) = dir {
            d.write_json("summary.json", &out)?;
        }
        out.final_state = Some(state);
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub stages: Vec<StageLog>,
    pub mrdpo: Option<MrdpoOutcome>,
    pub rebirth: Option<RebirthLog>,
    pub post_rebirth: Option<super::stages::RoundLog>,
    /// Held-out evaluation after each stage.
    pub reports: BTreeMap<String, EvalSummary>,
    pub qa: BTreeMap<String, f64>,
    #[serde(skip)]
    pub final_state: Option<ModelState>,
}

/// Output directory of a run: `config.toml`, `checkpoints/`, `logs/`, `reports/`.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the directory. An existing non-empty directory is refused
    /// unless `force` is set.
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        if root.exists() && fs::read_dir(root)?.next().is_some() && !force {
            return Err(Error::Config(format!(
                "{} already exists and is not empty (use --force to overwrite)",
                root.display()
            )));
        }
        Self::open(root)
    }

    /// Opens a directory for resuming, keeping what is there.
    pub fn open(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "logs", "reports"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.json"))
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        self.write_text(rel, &serde_json::to_string_pretty(value)?)
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<()> {
        fs::write(self.root.join(rel), text)?;
        Ok(())
    }
}
