use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and hyper-parameters of the audio-visual decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Longest token sequence the backbone accepts.
    pub max_context: usize,
    /// Frame cap `m`.
    pub max_frames: usize,
    /// Frames per second `phi`.
    pub frame_rate: f64,
    /// Audio encoder window `t_max`, seconds.
    pub audio_segment_len: f64,
    pub audio_tokens_per_segment: usize,
    /// Number of segment position embeddings available.
    pub max_segments: usize,
    /// Width of the raw per-frame visual input.
    pub visual_input_dim: usize,
    /// Width of the raw per-window audio input.
    pub audio_input_dim: usize,
    /// Output width of the frozen synthetic encoders.
    pub encoder_dim: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    /// Standard deviation of the Gaussian used for a fresh adapter's `A`.
    pub lora_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            model_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            max_context: 160,
            max_frames: 30,
            frame_rate: 1.0,
            audio_segment_len: 5.0,
            audio_tokens_per_segment: 5,
            max_segments: 12,
            visual_input_dim: 24,
            audio_input_dim: 24,
            encoder_dim: 32,
            lora_rank: 4,
            lora_scale: 2.0,
            lora_init_std: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_context", self.max_context),
            ("max_frames", self.max_frames),
            ("audio_tokens_per_segment", self.audio_tokens_per_segment),
            ("max_segments", self.max_segments),
            ("visual_input_dim", self.visual_input_dim),
            ("audio_input_dim", self.audio_input_dim),
            ("encoder_dim", self.encoder_dim),
            ("lora_rank", self.lora_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.frame_rate > 0.0 && self.audio_segment_len > 0.0 && self.lora_scale > 0.0) {
            return Err(Error::Config(
                "frame_rate, audio_segment_len and lora_scale must be positive".into(),
            ));
        }
        if !(self.lora_init_std >= 0.0) {
            return Err(Error::Config("lora_init_std must be non-negative".into()));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            n_heads: 5,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
