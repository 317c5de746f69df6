use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ProxyMode, StageConfig, StageKind};
use super::data;
use super::eval::{evaluate, greedy_caption, EvalSummary};
use super::optim::{optimize, BatchCursor};
use super::pipeline::Pipeline;
use crate::avmodel::{mix_seed, ModelState, ParamGroup, TrainMask};
use crate::error::{Error, Result};
use crate::losses::{
    cdpo_loss, dpo_loss, gdpo_loss, reference_logprobs, sft_loss, GuidedBatch, LossKind, PreferenceBatch,
    PreferenceItem, Sequence,
};
use crate::metrics::{split_phrases, Task};
use crate::par;
use crate::prefpipe::{build_round_dataset, PoolStats, PreferencePair};
use crate::synthcorpus::{caption_target, task_prompt, EventVocab};

const IDENTITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub examples: usize,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    /// 1-based position in the run.
    pub round: usize,
    /// Threshold schedule row used for pair selection.
    pub schedule_row: usize,
    pub loss: LossKind,
    pub proxy: ProxyMode,
    pub skipped: bool,
    /// Preference term of the first batch.
    pub initial_preference: Option<f64>,
    pub losses: Vec<f64>,
    /// Preference term of each step, without the likelihood term.
    pub preference: Vec<f64>,
    pub pairs: PoolStats,
    pub injected: usize,
    pub eval: EvalSummary,
}

impl RoundLog {
    pub fn unnatural_rate(&self) -> f64 {
        self.eval.unnatural_rate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebirthLog {
    pub labelled: usize,
    pub kept: usize,
    pub filtered_fraction: f64,
    pub train: StageLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrdpoOutcome {
    pub rounds: Vec<RoundLog>,
    /// Round after which the unnatural rate crossed the halt threshold.
    pub halted_at: Option<usize>,
}

pub fn mask_for(kind: StageKind) -> TrainMask {
    use ParamGroup::*;
    let groups: &[ParamGroup] = match kind {
        StageKind::Pretrain => &[Backbone, VisualAligner, AudioAligner, SegmentPositions],
        StageKind::Align => &[AudioAligner, SegmentPositions],
        StageKind::Sft | StageKind::Rebirth => &[Lora, AudioAligner, SegmentPositions],
        StageKind::Mrdpo | StageKind::Gdpo => &[Lora],
    };
    TrainMask::of(groups).expect("stage masks never include the encoders")
}

/// Inserts an `#audio:` marker before the first audio phrase of a caption.
pub fn decorate_audio(caption: &str, vocab: &EventVocab) -> String {
    let mut marked = false;
    split_phrases(caption)
        .iter()
        .map(|p| match vocab.id_of(p) {
            Some(id) if id.starts_with('a') && !marked => {
                marked = true;
                format!("#audio: {p}.")
            }
            _ => format!("{p}."),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

impl Pipeline {
    fn supervised(&self, state: &mut ModelState, kind: StageKind, cfg: &StageConfig, examples: &[Sequence]) -> Result<StageLog> {
        cfg.validate(kind)?;
        let mask = mask_for(kind);
        let mut cursor = BatchCursor::new(examples.len(), mix_seed(cfg.seed, 1))?;
        let losses = optimize(state, &mask, cfg, kind.name(), |s, _| {
            let batch: Vec<Sequence> = cursor.next_batch(cfg.batch_size).into_iter().map(|i| examples[i].clone()).collect();
            sft_loss(s, &mask, &batch)
        })?;
        log::info!(
            "{}: {} steps on {} examples, loss {:.4} -> {:.4}",
            kind.name(),
            cfg.steps,
            examples.len(),
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN)
        );
        Ok(StageLog {
            stage: kind.name().into(),
            examples: examples.len(),
            losses,
        })
    }

    /// Trains the backbone and both branches, then re-initializes the audio
    /// branch so the result is a model that cannot hear.
    pub fn run_pretrain(&self, state: &mut ModelState, cfg: &StageConfig) -> Result<StageLog> {
        if state.has_adapter() {
            return Err(Error::state("pretraining expects a model without an adapter"));
        }
        let examples = data::pretrain_examples(&self.train, &self.tok, cfg.seed)?;
        let log = self.supervised(state, StageKind::Pretrain, cfg, &examples)?;
        state.reset_aligner("aud", mix_seed(cfg.seed, 2))?;
        state.reset_segment_positions(mix_seed(cfg.seed, 3));
        Ok(log)
    }

    /// Trains only the audio aligner and segment positions on audio-only captions.
    pub fn run_alignment(&self, state: &mut ModelState, cfg: &StageConfig) -> Result<StageLog> {
        if state.has_adapter() {
            return Err(Error::state("alignment expects a model without an adapter"));
        }
        let examples = data::alignment_examples(&self.train, &self.tok, cfg.seed)?;
        self.supervised(state, StageKind::Align, cfg, &examples)
    }

    /// Attaches an adapter and trains it with the audio branch on
    /// audio-visual captions and count questions.
    pub fn run_sft(&self, state: &mut ModelState, cfg: &StageConfig) -> Result<StageLog> {
        if !state.has_adapter() {
            state.lora_attach()?;
        }
        let examples = data::sft_examples(&self.train, &self.tok, cfg.seed)?;
        self.supervised(state, StageKind::Sft, cfg, &examples)
    }

    fn preference_items(&self, pairs: &[PreferencePair]) -> Result<Vec<PreferenceItem>> {
        let index: HashMap<&str, usize> = self.train.videos.iter().enumerate().map(|(i, v)| (v.id.as_str(), i)).collect();
        pairs
            .iter()
            .map(|p| {
                let i = *index
                    .get(p.video_id.as_str())
                    .ok_or_else(|| Error::data(format!("pair refers to unknown video {}", p.video_id)))?;
                Ok(PreferenceItem {
                    media: self.train.media[i].clone(),
                    prompt: task_prompt(&self.tok, &p.task)?,
                    chosen: caption_target(&self.tok, &p.chosen)?,
                    rejected: caption_target(&self.tok, &p.rejected)?,
                })
            })
            .collect()
    }

    /// One round: merge the previous adapter, freeze a reference copy,
    /// attach a fresh adapter, build the pair dataset, train and evaluate.
    /// In direct mode `direct_reference` is used instead and the current
    /// adapter keeps training.
    pub fn run_mrdpo_round(
        &self,
        state: &mut ModelState,
        round: usize,
        schedule_row: usize,
        cfg: &StageConfig,
        kind: StageKind,
        direct_reference: Option<&ModelState>,
    ) -> Result<RoundLog> {
        cfg.validate(kind)?;
        let th = self.schedule.get(schedule_row)?;
        let owned;
        let reference: &ModelState = match cfg.proxy {
            ProxyMode::LoraProxy => {
                if state.has_adapter() {
                    state.lora_merge()?;
                }
                owned = state.clone();
                state.lora_attach()?;
                &owned
            }
            ProxyMode::Direct => {
                if !state.has_adapter() {
                    state.lora_attach()?;
                }
                direct_reference.ok_or_else(|| Error::state("direct mode needs a fixed reference model"))?
            }
        };
        state.round = round;
        let round_seed = mix_seed(cfg.seed, round as u64);
        let pair_cfg = crate::prefpipe::PairConfig {
            seed: mix_seed(self.cfg.pairs.seed, round as u64),
            ..self.cfg.pairs.clone()
        };
        let dataset = build_round_dataset(state, &self.tok, &self.judge, &self.train, round, &th, &pair_cfg)?;
        let mut pairs = dataset.pairs;
        let mut injected = 0;
        if cfg.inject_markers > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(round_seed, 7));
            for p in &mut pairs {
                if rng.random_bool(cfg.inject_markers) {
                    p.chosen = decorate_audio(&p.chosen, &self.judge.vocab);
                    injected += 1;
                }
            }
        }
        let mut log = RoundLog {
            round,
            schedule_row,
            loss: cfg.loss,
            proxy: cfg.proxy,
            skipped: pairs.is_empty(),
            initial_preference: None,
            losses: Vec::new(),
            preference: Vec::new(),
            pairs: dataset.stats,
            injected,
            eval: EvalSummary::default(),
        };
        if log.skipped {
            log::warn!("round {round}: empty pair dataset, skipping training");
        } else {
            let items = self.preference_items(&pairs)?;
            let ref_lp = reference_logprobs(reference, &PreferenceBatch { items: items.clone(), beta: cfg.beta })?;
            let gt = data::gt_examples(&self.train, &self.tok, mix_seed(round_seed, 3))?;
            let mut cursor = BatchCursor::new(items.len(), mix_seed(round_seed, 1))?;
            let mut gt_cursor = BatchCursor::new(gt.len(), mix_seed(round_seed, 2))?;
            let mask = mask_for(kind);
            let mut first = None;
            let mut pref = Vec::with_capacity(cfg.steps);
            log.losses = optimize(state, &mask, cfg, kind.name(), |s, _| {
                let idx = cursor.next_batch(cfg.batch_size);
                let batch = PreferenceBatch {
                    items: idx.iter().map(|&i| items[i].clone()).collect(),
                    beta: cfg.beta,
                };
                let lp: Vec<(f64, f64)> = idx.iter().map(|&i| ref_lp[i]).collect();
                let out = match cfg.loss {
                    LossKind::Dpo => dpo_loss(s, &mask, &batch, &lp)?,
                    LossKind::Cdpo => cdpo_loss(s, &mask, &batch, cfg.lambda, &lp)?,
                    LossKind::Gdpo => {
                        let gt_batch = gt_cursor.next_batch(cfg.batch_size).into_iter().map(|i| gt[i].clone()).collect();
                        gdpo_loss(s, &mask, &GuidedBatch { pref: batch, gt: gt_batch, lambda: cfg.lambda }, &lp)?
                    }
                    LossKind::Sft => return Err(Error::Config("sft is not a preference loss".into())),
                };
                if first.is_none() {
                    first = Some(out.preference);
                    let fresh = cfg.proxy == ProxyMode::LoraProxy || round == 1;
                    if fresh && (out.preference - std::f64::consts::LN_2).abs() > IDENTITY_TOL {
                        return Err(Error::invariant(format!(
                            "round {round}: policy differs from reference at round start (loss {})",
                            out.preference
                        )));
                    }
                }
                pref.push(out.preference);
                Ok(out)
            })?;
            log.initial_preference = first;
            log.preference = pref;
        }
        let report = evaluate(state, &self.tok, &self.judge, &self.eval, self.cfg.eval_seed, self.cfg.max_new_tokens)?;
        log.eval = EvalSummary::from(&report);
        log::info!(
            "round {round} ({:?}, {:?}): {} pairs, global total {:.3}, rep {:.3}, unnatural {:.3}",
            cfg.loss,
            cfg.proxy,
            pairs.len(),
            log.eval.global.total_rate,
            log.eval.global.repetition_rate,
            log.eval.unnatural_rate
        );
        Ok(log)
    }

    /// Runs up to `rounds` rounds, stopping after the first one whose
    /// held-out unnatural rate exceeds the halt threshold.
    pub fn run_mrdpo(&self, state: &mut ModelState, cfg: &StageConfig, rounds: usize) -> Result<MrdpoOutcome> {
        if rounds == 0 || rounds > self.schedule.len() {
            return Err(Error::Config(format!(
                "{rounds} rounds requested but the schedule has {} rows",
                self.schedule.len()
            )));
        }
        let reference = match cfg.proxy {
            ProxyMode::Direct => Some(state.clone()),
            ProxyMode::LoraProxy => None,
        };
        let mut out = MrdpoOutcome {
            rounds: Vec::new(),
            halted_at: None,
        };
        for round in 1..=rounds {
            let log = self.run_mrdpo_round(state, round, round, cfg, StageKind::Mrdpo, reference.as_ref())?;
            let rate = log.unnatural_rate();
            out.rounds.push(log);
            if rate > self.cfg.halt_unnatural {
                log::warn!("halting mrDPO after round {round}: unnatural rate {rate:.3}");
                out.halted_at = Some(round);
                break;
            }
        }
        Ok(out)
    }

    /// Labels the training corpus with `labeller`, drops unnatural captions
    /// and fine-tunes a fresh adapter on `base` with the rest plus count questions.
    pub fn run_rebirth(&self, base: &ModelState, labeller: &ModelState, cfg: &StageConfig) -> Result<(ModelState, RebirthLog)> {
        cfg.validate(StageKind::Rebirth)?;
        if base.has_adapter() {
            return Err(Error::state("rebirth starts from the post-alignment model, which has no adapter"));
        }
        let sampler = labeller.sampler()?;
        let tasks = data::video_tasks(&self.train, data::LOCALS, cfg.seed);
        let captions = par::try_map(&tasks, |i, pair| {
            pair.iter()
                .map(|t| Ok((*t, greedy_caption(&sampler, &self.tok, &self.train.media[i], t, self.cfg.max_new_tokens)?)))
                .collect::<Result<Vec<(Task, String)>>>()
        })?;
        let labelled = captions.iter().map(Vec::len).sum::<usize>();
        let mut examples = Vec::new();
        for (i, caps) in captions.iter().enumerate() {
            for (task, caption) in caps {
                if self.judge.detector.is_unnatural(caption) {
                    continue;
                }
                examples.push(Sequence {
                    media: self.train.media[i].clone(),
                    prompt: task_prompt(&self.tok, task)?,
                    target: caption_target(&self.tok, caption)?,
                });
            }
        }
        let kept = examples.len();
        if kept == 0 {
            return Err(Error::data(format!("rebirth: all {labelled} self-labelled captions were filtered as unnatural")));
        }
        let filtered_fraction = 1.0 - kept as f64 / labelled as f64;
        log::info!("rebirth: kept {kept} of {labelled} captions ({:.1}% filtered)", 100.0 * filtered_fraction);
        examples.extend(data::count_examples(&self.train, &self.tok)?);
        let mut state = base.clone();
        state.lora_attach()?;
        let train = self.supervised(&mut state, StageKind::Rebirth, cfg, &examples)?;
        Ok((
            state,
            RebirthLog {
                labelled,
                kept,
                filtered_fraction,
                train,
            },
        ))
    }

    /// A single guided round on the reborn model.
    pub fn run_post_rebirth_gdpo(&self, state: &mut ModelState, cfg: &StageConfig) -> Result<RoundLog> {
        let round = state.round + 1;
        self.run_mrdpo_round(state, round, self.cfg.post_rebirth_row, cfg, StageKind::Gdpo, None)
    }
}
