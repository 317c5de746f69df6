//! Frame sampling, raw media inputs and chronological interleaving.

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Raw per-frame visual inputs and their timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFeatures {
    /// `n x visual_input_dim`, one row per sampled frame.
    pub features: Tensor,
    pub timestamps: Vec<f64>,
}

impl FrameFeatures {
    pub fn new(features: Tensor, timestamps: Vec<f64>) -> Result<Self> {
        if features.rows() != timestamps.len() {
            return Err(Error::Dimension {
                op: "frame_features",
                left: features.shape().to_vec(),
                right: vec![timestamps.len()],
            });
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::contract("frame timestamps must be strictly increasing"));
        }
        Ok(Self {
            features,
            timestamps,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// Audio split into encoder windows of `audio_segment_len` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioSegments {
    /// One `audio_tokens_per_segment x audio_input_dim` matrix per window.
    pub segments: Vec<Tensor>,
}

impl AudioSegments {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Media inputs of one example. Either branch may be absent (audio-only
/// alignment data, visual-only baselines), but not both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediaInput {
    pub frames: Option<FrameFeatures>,
    pub audio: Option<AudioSegments>,
}

impl MediaInput {
    pub fn visual_only(&self) -> Self {
        Self {
            frames: self.frames.clone(),
            audio: None,
        }
    }

    pub fn audio_only(&self) -> Self {
        Self {
            frames: None,
            audio: self.audio.clone(),
        }
    }

    /// Number of backbone positions the media occupies.
    pub fn token_len(&self, cfg: &ModelConfig) -> usize {
        self.frames.as_ref().map_or(0, FrameFeatures::len)
            + self
                .audio
                .as_ref()
                .map_or(0, |a| a.len() * cfg.audio_tokens_per_segment)
    }
}

/// Timestamps (seconds) of the frames sampled from a video of length
/// `duration`.
///
/// Below the cap, frames are taken at `frame_rate` at the centre of each
/// sampling period. When `frame_rate * duration` exceeds `max_frames`, exactly
/// `max_frames` frames are spread uniformly over the video.
pub fn sample_frames(duration: f64, cfg: &ModelConfig) -> Result<Vec<f64>> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::domain(format!("video duration must be positive, got {duration}")));
    }
    let wanted = cfg.frame_rate * duration;
    if wanted <= cfg.max_frames as f64 {
        let n = (wanted.floor() as usize).max(1);
        let period = 1.0 / cfg.frame_rate;
        Ok((0..n).map(|k| (k as f64 + 0.5) * period).collect())
    } else {
        let m = cfg.max_frames;
        let step = duration / m as f64;
        Ok((0..m).map(|k| (k as f64 + 0.5) * step).collect())
    }
}

/// Number of audio encoder windows for a video of length `duration`.
pub fn audio_segment_count(duration: f64, cfg: &ModelConfig) -> usize {
    ((duration / cfg.audio_segment_len).ceil() as usize).max(1)
}

/// Audio slice boundaries `b_0..=b_n` in token units: `b_i = round(i * L / n)`
/// with halves rounded up.
pub fn interleave_boundaries(n_frames: usize, audio_tokens: usize) -> Result<Vec<usize>> {
    if n_frames == 0 {
        return Err(Error::domain("interleave needs at least one visual block"));
    }
    Ok((0..=n_frames)
        .map(|i| (2 * i * audio_tokens + n_frames) / (2 * n_frames))
        .collect())
}

/// Row order of the interleaved sequence: for each frame `i`, its visual row
/// followed by audio rows `b_{i-1}..b_i`. Entries are `(is_audio, row)`.
pub fn interleave_order(n_frames: usize, audio_tokens: usize) -> Result<Vec<(bool, usize)>> {
    let b = interleave_boundaries(n_frames, audio_tokens)?;
    let mut order = Vec::with_capacity(n_frames + audio_tokens);
    for i in 0..n_frames {
        order.push((false, i));
        order.extend((b[i]..b[i + 1]).map(|j| (true, j)));
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_below_cap() {
        let cfg = ModelConfig::default();
        let ts = sample_frames(10.0, &cfg).unwrap();
        assert_eq!(ts.len(), 10);
        assert_eq!(ts[0], 0.5);
        assert_eq!(ts[1], 1.5);
        assert_eq!(ts[9], 9.5);
    }

    #[test]
    fn frames_at_and_above_cap() {
        let cfg = ModelConfig::default();
        assert_eq!(sample_frames(30.0, &cfg).unwrap().len(), 30);
        let ts = sample_frames(45.0, &cfg).unwrap();
        assert_eq!(ts.len(), 30);
        let step = ts[1] - ts[0];
        assert!(ts.windows(2).all(|w| ((w[1] - w[0]) - step).abs() < 1e-12));
        assert!(ts[0] > 0.0 && *ts.last().unwrap() < 45.0);
    }

    #[test]
    fn frame_count_law() {
        let cfg = ModelConfig::default();
        for t in 1..=90 {
            let n = sample_frames(t as f64, &cfg).unwrap().len();
            assert_eq!(n, t.min(cfg.max_frames));
        }
    }

    #[test]
    fn non_positive_duration_rejected() {
        let cfg = ModelConfig::default();
        assert!(matches!(sample_frames(0.0, &cfg), Err(Error::Domain(_))));
        assert!(matches!(sample_frames(-3.0, &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn boundaries_rounding_rule() {
        assert_eq!(interleave_boundaries(3, 10).unwrap(), vec![0, 3, 7, 10]);
        assert_eq!(interleave_boundaries(2, 4).unwrap(), vec![0, 2, 4]);
        assert_eq!(interleave_boundaries(1, 7).unwrap(), vec![0, 7]);
        assert!(interleave_boundaries(0, 7).is_err());
    }

    #[test]
    fn order_is_a_partition() {
        for n in 1..12 {
            for la in 0..40 {
                let order = interleave_order(n, la).unwrap();
                let audio: Vec<usize> = order.iter().filter(|e| e.0).map(|e| e.1).collect();
                let visual: Vec<usize> = order.iter().filter(|e| !e.0).map(|e| e.1).collect();
                assert_eq!(audio, (0..la).collect::<Vec<_>>());
                assert_eq!(visual, (0..n).collect::<Vec<_>>());
            }
        }
    }
}
