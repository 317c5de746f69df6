//! The scaled-down audio-visual LLM: frozen synthetic encoders, modality
//! aligners, segment position embeddings, chronological interleaving, a
//! causal decoder backbone, and LoRA adapters with merge and re-init.

mod checkpoint;
mod config;
mod forward;
mod infer;
mod media;
mod state;

pub use checkpoint::CHECKPOINT_FORMAT;
pub use config::ModelConfig;
pub use forward::{interleave, Binder};
pub use infer::{GenerateOptions, Prefix, Sampler};
pub use media::{
    audio_segment_count, interleave_boundaries, interleave_order, sample_frames, AudioSegments,
    FrameFeatures, MediaInput,
};
pub use state::{LoraAdapter, ModelState, ParamGroup, TrainMask};

pub use state::mix_seed;
