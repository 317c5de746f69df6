//! Differentiable forward pass: encoders, aligners, interleaving and the
//! causal decoder.

use std::collections::HashMap;

use super::media::{interleave_order, AudioSegments, FrameFeatures, MediaInput};
use super::state::{LoraAdapter, ModelState, TrainMask};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};

/// Inserts each weight into a graph at most once per forward pass, as a
/// tracked parameter when the mask trains it and as a constant otherwise.
pub struct Binder<'a> {
    state: &'a ModelState,
    mask: &'a TrainMask,
    bound: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(state: &'a ModelState, mask: &'a TrainMask) -> Self {
        Self {
            state,
            mask,
            bound: HashMap::new(),
        }
    }

    pub fn state(&self) -> &'a ModelState {
        self.state
    }

    pub fn w(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.state.weight(name)?;
        let v = g.maybe_param(name, t, self.mask.trains(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x W`, plus `scale (x A) B` when an adapter covers `name`.
    fn project(&mut self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = self.w(g, name)?;
        let base = g.matmul(x, w)?;
        let Some(adapter) = &self.state.adapter else {
            return Ok(base);
        };
        if adapter.factors_for(name).is_none() {
            return Ok(base);
        }
        let scale = adapter.scale;
        let a = self.w(g, &LoraAdapter::a_key(name))?;
        let b = self.w(g, &LoraAdapter::b_key(name))?;
        let xa = g.matmul(x, a)?;
        let xab = g.matmul(xa, b)?;
        let delta = g.scale(xab, scale)?;
        g.add(base, delta)
    }

    fn mlp(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let w1 = self.w(g, &format!("{prefix}.w1"))?;
        let b1 = self.w(g, &format!("{prefix}.b1"))?;
        let w2 = self.w(g, &format!("{prefix}.w2"))?;
        let b2 = self.w(g, &format!("{prefix}.b2"))?;
        let h = g.matmul(x, w1)?;
        let h = g.add_row_bias(h, b1)?;
        let h = g.gelu(h)?;
        let o = g.matmul(h, w2)?;
        g.add_row_bias(o, b2)
    }

    /// Visual tokens, one row per frame. Frames are processed row-wise, so
    /// each frame's token depends on that frame only.
    pub fn encode_visual(&mut self, g: &mut Graph, frames: &FrameFeatures) -> Result<Var> {
        if frames.is_empty() {
            return Err(Error::domain("no frames to encode"));
        }
        let cfg = &self.state.config;
        if frames.features.cols() != cfg.visual_input_dim {
            return Err(Error::Dimension {
                op: "encode_visual",
                left: frames.features.shape().to_vec(),
                right: vec![cfg.visual_input_dim],
            });
        }
        let x = g.constant(frames.features.clone());
        let enc = self.w(g, "enc.visual")?;
        let z = g.matmul(x, enc)?;
        self.mlp(g, z, "vis")
    }

    /// Audio tokens: per-window encoder features plus the window's position
    /// embedding, concatenated in time, then the audio aligner.
    pub fn encode_audio(&mut self, g: &mut Graph, audio: &AudioSegments) -> Result<Var> {
        if audio.is_empty() {
            return Err(Error::domain("no audio segments to encode"));
        }
        let cfg = &self.state.config;
        let tps = cfg.audio_tokens_per_segment;
        if audio.len() > cfg.max_segments {
            return Err(Error::capacity(format!(
                "{} audio segments exceed the {} available position embeddings",
                audio.len(),
                cfg.max_segments
            )));
        }
        let enc = self.w(g, "enc.audio")?;
        let pos = self.w(g, "seg_pos")?;
        let mut parts = Vec::with_capacity(audio.len());
        for (j, seg) in audio.segments.iter().enumerate() {
            if seg.rows() != tps || seg.cols() != cfg.audio_input_dim {
                return Err(Error::Dimension {
                    op: "encode_audio",
                    left: seg.shape().to_vec(),
                    right: vec![tps, cfg.audio_input_dim],
                });
            }
            let s = g.constant(seg.clone());
            let z = g.matmul(s, enc)?;
            let p = g.slice_rows(pos, j * tps, tps)?;
            parts.push(g.add(z, p)?);
        }
        let z = g.concat_rows(&parts)?;
        self.mlp(g, z, "aud")
    }

    /// Media token matrix `H` for whichever branches are present.
    pub fn media_tokens(&mut self, g: &mut Graph, media: &MediaInput) -> Result<Var> {
        let hv = media
            .frames
            .as_ref()
            .map(|f| self.encode_visual(g, f))
            .transpose()?;
        let ha = media
            .audio
            .as_ref()
            .map(|a| self.encode_audio(g, a))
            .transpose()?;
        match (hv, ha) {
            (Some(v), Some(a)) => interleave(g, v, a),
            (Some(v), None) => Ok(v),
            (None, Some(a)) => Ok(a),
            (None, None) => Err(Error::domain("example has neither frames nor audio")),
        }
    }

    /// Log-probabilities (`len(target) x 1`) of each target token given the
    /// media, the prompt and the preceding targets. `None` for an empty target.
    pub fn target_logprobs(
        &mut self,
        g: &mut Graph,
        media: &MediaInput,
        prompt: &[usize],
        target: &[usize],
    ) -> Result<Option<Var>> {
        if target.is_empty() {
            return Ok(None);
        }
        if prompt.is_empty() {
            return Err(Error::contract("prompt must contain at least one token"));
        }
        let cfg = &self.state.config;
        let n_media = media.token_len(cfg);
        let seq_len = n_media + prompt.len() + target.len() - 1;
        if seq_len > cfg.max_context {
            return Err(Error::capacity(format!(
                "sequence of {seq_len} tokens exceeds the context window of {}",
                cfg.max_context
            )));
        }
        let h = self.media_tokens(g, media)?;
        let emb = self.w(g, "tok_emb")?;
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(&target[..target.len() - 1]);
        let text = g.embedding(emb, &ids)?;
        let x = g.concat_rows(&[h, text])?;
        let pos = self.w(g, "pos_emb")?;
        let p = g.slice_rows(pos, 0, seq_len)?;
        let mut x = g.add(x, p)?;
        for l in 0..cfg.n_layers {
            x = self.block(g, x, l)?;
        }
        let first = n_media + prompt.len() - 1;
        let x = g.slice_rows(x, first, target.len())?;
        let lg = self.w(g, "ln_f.g")?;
        let lb = self.w(g, "ln_f.b")?;
        let x = g.layer_norm(x, lg, lb)?;
        let head = self.w(g, "head")?;
        let logits = g.matmul(x, head)?;
        let lp = g.log_softmax(logits)?;
        Ok(Some(g.gather(lp, target)?))
    }

    fn block(&mut self, g: &mut Graph, x: Var, l: usize) -> Result<Var> {
        let cfg = &self.state.config;
        let (nh, dh) = (cfg.n_heads, cfg.head_dim());
        let p = format!("layers.{l}");
        let g1 = self.w(g, &format!("{p}.ln1.g"))?;
        let b1 = self.w(g, &format!("{p}.ln1.b"))?;
        let h = g.layer_norm(x, g1, b1)?;
        let q = self.project(g, h, &format!("{p}.attn.wq"))?;
        let k = self.project(g, h, &format!("{p}.attn.wk"))?;
        let v = self.project(g, h, &format!("{p}.attn.wv"))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(nh);
        for hd in 0..nh {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale)?;
            let a = g.causal_softmax(s)?;
            heads.push(g.matmul(a, vh)?);
        }
        let o = g.concat_cols(&heads)?;
        let o = self.project(g, o, &format!("{p}.attn.wo"))?;
        let x = g.add(x, o)?;

        let g2 = self.w(g, &format!("{p}.ln2.g"))?;
        let b2 = self.w(g, &format!("{p}.ln2.b"))?;
        let h = g.layer_norm(x, g2, b2)?;
        let w1 = self.w(g, &format!("{p}.ffn.w1"))?;
        let fb1 = self.w(g, &format!("{p}.ffn.b1"))?;
        let w2 = self.w(g, &format!("{p}.ffn.w2"))?;
        let fb2 = self.w(g, &format!("{p}.ffn.b2"))?;
        let f = g.matmul(h, w1)?;
        let f = g.add_row_bias(f, fb1)?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, w2)?;
        let f = g.add_row_bias(f, fb2)?;
        g.add(x, f)
    }
}

/// Chronological interleaving of visual rows with their audio slices.
pub fn interleave(g: &mut Graph, hv: Var, ha: Var) -> Result<Var> {
    let n = g.value(hv).rows();
    let la = g.value(ha).rows();
    if n == 0 || la == 0 {
        return Err(Error::domain("interleave needs non-empty visual and audio tokens"));
    }
    let order = interleave_order(n, la)?;
    let mut parts = Vec::with_capacity(2 * n);
    let mut i = 0;
    while i < order.len() {
        let (is_audio, start) = order[i];
        let mut len = 1;
        while i + len < order.len() && order[i + len] == (is_audio, start + len) {
            len += 1;
        }
        let src = if is_audio { ha } else { hv };
        parts.push(g.slice_rows(src, start, len)?);
        i += len;
    }
    g.concat_rows(&parts)
}

impl ModelState {
    /// Per-token log-probabilities of `target`, without gradient tracking.
    pub fn forward(&self, media: &MediaInput, prompt: &[usize], target: &[usize]) -> Result<Vec<f64>> {
        let mask = TrainMask::frozen();
        let mut b = Binder::new(self, &mask);
        let mut g = Graph::new();
        Ok(b.target_logprobs(&mut g, media, prompt, target)?
            .map(|v| g.value(v).data().to_vec())
            .unwrap_or_default())
    }

    /// `log p(target | media, prompt)` as a sum of per-token log-probabilities.
    pub fn sequence_logprob(&self, media: &MediaInput, prompt: &[usize], target: &[usize]) -> Result<f64> {
        Ok(self.forward(media, prompt, target)?.iter().sum())
    }

    /// The interleaved media token matrix, without gradient tracking.
    pub fn media_tokens(&self, media: &MediaInput) -> Result<Tensor> {
        let mask = TrainMask::frozen();
        let mut b = Binder::new(self, &mask);
        let mut g = Graph::new();
        let h = b.media_tokens(&mut g, media)?;
        Ok(g.value(h).clone())
    }
}
