//! Audio-visual captioning with multi-round preference optimization.
//!
//! The crate covers the full pipeline on a synthetic captioning domain:
//! a small autodiff core ([`numcore`]), the audio-visual decoder with LoRA
//! adapters ([`avmodel`]), preference and supervised losses ([`losses`]),
//! caption metrics ([`metrics`]), the synthetic corpus and its deterministic
//! judge ([`synthcorpus`]), preference-pair construction ([`prefpipe`]) and
//! stage orchestration ([`trainer`]).

pub mod error;
pub mod losses;
pub mod metrics;
pub mod numcore;
pub mod avmodel;
pub mod par;
pub mod prefpipe;
pub mod synthcorpus;
pub mod trainer;

pub use error::{Error, Result};
