//! Stage orchestration: pretraining, audio alignment, supervised
//! fine-tuning, multi-round preference optimization with adapter proxies,
//! rebirth tuning and the final guided round.

mod config;
mod data;
mod eval;
mod optim;
mod pipeline;
mod stages;

pub use config::{PipelineConfig, ProxyMode, StageConfig, StageKind};
pub use data::{
    alignment_examples, caption_examples, count_examples, gt_examples, pretrain_examples, sft_examples, video_tasks, View,
    LOCALS,
};
pub use eval::{eval_tasks, evaluate, greedy_caption, qa_accuracy, EvalSummary};
pub use optim::{check_frozen, frozen_fingerprints, optimize, BatchCursor};
pub use pipeline::{Pipeline, PipelineOutcome, RunDir};
pub use stages::{decorate_audio, mask_for, MrdpoOutcome, RebirthLog, RoundLog, StageLog};
