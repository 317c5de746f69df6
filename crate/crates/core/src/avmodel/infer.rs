//! Autoregressive sampling with a key/value cache.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::media::MediaInput;
use super::state::ModelState;
use crate::error::{Error, Result};
use crate::numcore::{gelu_slice, gemm, layer_norm_row, log_softmax_rows, softmax_rows, Layout, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    /// 0 means greedy decoding.
    pub temperature: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub eos: usize,
}

struct LayerWeights<'a> {
    ln1: (&'a [f64], &'a [f64]),
    // attention projections with any adapter folded in
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln2: (&'a [f64], &'a [f64]),
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

/// Decoding-time view of a [`ModelState`].
pub struct Sampler<'a> {
    state: &'a ModelState,
    layers: Vec<LayerWeights<'a>>,
}

/// Cached keys and values for every layer, plus the next-token logits.
#[derive(Debug, Clone)]
pub struct Prefix {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    logits: Vec<f64>,
}

impl Prefix {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

fn effective(state: &ModelState, name: &str) -> Result<Tensor> {
    let mut w = state.weight(name)?.clone();
    if let Some(a) = &state.adapter {
        if let Some(d) = a.delta(name)? {
            w.axpy(1.0, &d)?;
        }
    }
    Ok(w)
}

impl<'a> Sampler<'a> {
    pub fn new(state: &'a ModelState) -> Result<Self> {
        let mut layers = Vec::with_capacity(state.config.n_layers);
        for l in 0..state.config.n_layers {
            let p = format!("layers.{l}");
            let d = |n: &str| -> Result<&'a [f64]> { Ok(state.weight(&format!("{p}.{n}"))?.data()) };
            layers.push(LayerWeights {
                ln1: (d("ln1.g")?, d("ln1.b")?),
                wq: effective(state, &format!("{p}.attn.wq"))?,
                wk: effective(state, &format!("{p}.attn.wk"))?,
                wv: effective(state, &format!("{p}.attn.wv"))?,
                wo: effective(state, &format!("{p}.attn.wo"))?,
                ln2: (d("ln2.g")?, d("ln2.b")?),
                w1: d("ffn.w1")?,
                b1: d("ffn.b1")?,
                w2: d("ffn.w2")?,
                b2: d("ffn.b2")?,
            });
        }
        Ok(Self { state, layers })
    }

    /// Runs `m` new rows (`x`, `m x d`, position embeddings not yet added)
    /// through the decoder, extending the cache. Returns the final hidden
    /// state of the last row.
    fn extend(&self, prefix: &mut Prefix, mut x: Vec<f64>) -> Result<Vec<f64>> {
        let cfg = &self.state.config;
        let d = cfg.model_dim;
        let m = x.len() / d;
        let p0 = prefix.len;
        if p0 + m > cfg.max_context {
            return Err(Error::capacity(format!(
                "sequence of {} tokens exceeds the context window of {}",
                p0 + m,
                cfg.max_context
            )));
        }
        let pos = self.state.weight("pos_emb")?.data();
        for (v, pe) in x.iter_mut().zip(&pos[p0 * d..(p0 + m) * d]) {
            *v += pe;
        }
        let (nh, dh) = (cfg.n_heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let f = cfg.ffn_dim;
        let mut h = vec![0.0; m * d];
        for (l, w) in self.layers.iter().enumerate() {
            for i in 0..m {
                layer_norm_row(&x[i * d..(i + 1) * d], w.ln1.0, w.ln1.1, &mut h[i * d..(i + 1) * d]);
            }
            let mut q = vec![0.0; m * d];
            let mut k = vec![0.0; m * d];
            let mut v = vec![0.0; m * d];
            gemm(m, d, d, &h, Layout::N, w.wq.data(), Layout::N, &mut q, 0.0);
            gemm(m, d, d, &h, Layout::N, w.wk.data(), Layout::N, &mut k, 0.0);
            gemm(m, d, d, &h, Layout::N, w.wv.data(), Layout::N, &mut v, 0.0);
            prefix.keys[l].extend_from_slice(&k);
            prefix.values[l].extend_from_slice(&v);
            let keys = &prefix.keys[l];
            let vals = &prefix.values[l];
            let mut att = vec![0.0; m * d];
            let mut scores = Vec::with_capacity(p0 + m);
            for i in 0..m {
                let n_keys = p0 + i + 1;
                for hd in 0..nh {
                    let qi = &q[i * d + hd * dh..i * d + (hd + 1) * dh];
                    scores.clear();
                    for j in 0..n_keys {
                        let kj = &keys[j * d + hd * dh..j * d + (hd + 1) * dh];
                        scores.push(qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale);
                    }
                    let probs = softmax_rows(&scores, 1, n_keys, None);
                    let out = &mut att[i * d + hd * dh..i * d + (hd + 1) * dh];
                    for (j, pj) in probs.iter().enumerate() {
                        let vj = &vals[j * d + hd * dh..j * d + (hd + 1) * dh];
                        out.iter_mut().zip(vj).for_each(|(o, vv)| *o += pj * vv);
                    }
                }
            }
            gemm(m, d, d, &att, Layout::N, w.wo.data(), Layout::N, &mut x, 1.0);
            for i in 0..m {
                layer_norm_row(&x[i * d..(i + 1) * d], w.ln2.0, w.ln2.1, &mut h[i * d..(i + 1) * d]);
            }
            let mut hid = vec![0.0; m * f];
            for row in hid.chunks_mut(f) {
                row.copy_from_slice(w.b1);
            }
            gemm(m, d, f, &h, Layout::N, w.w1, Layout::N, &mut hid, 1.0);
            gelu_slice(&mut hid);
            for row in x.chunks_mut(d) {
                row.iter_mut().zip(w.b2).for_each(|(a, b)| *a += b);
            }
            gemm(m, f, d, &hid, Layout::N, w.w2, Layout::N, &mut x, 1.0);
        }
        prefix.len += m;
        Ok(x[(m - 1) * d..].to_vec())
    }

    fn logits(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        let cfg = &self.state.config;
        let d = cfg.model_dim;
        let mut h = vec![0.0; d];
        layer_norm_row(
            hidden,
            self.state.weight("ln_f.g")?.data(),
            self.state.weight("ln_f.b")?.data(),
            &mut h,
        );
        let mut out = vec![0.0; cfg.vocab_size];
        gemm(1, d, cfg.vocab_size, &h, Layout::N, self.state.weight("head")?.data(), Layout::N, &mut out, 0.0);
        Ok(out)
    }

    fn embed(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let emb = self.state.weight("tok_emb")?;
        let mut x = Vec::with_capacity(ids.len() * self.state.config.model_dim);
        for &id in ids {
            if id >= emb.rows() {
                return Err(Error::Dimension {
                    op: "embedding",
                    left: emb.shape().to_vec(),
                    right: vec![id],
                });
            }
            x.extend_from_slice(emb.row(id));
        }
        Ok(x)
    }

    /// Encodes the media and prompt, leaving the cache ready for decoding.
    pub fn prefill(&self, media: &MediaInput, prompt: &[usize]) -> Result<Prefix> {
        if prompt.is_empty() {
            return Err(Error::contract("prompt must contain at least one token"));
        }
        let h = self.state.media_tokens(media)?;
        let mut x = h.into_data();
        x.extend(self.embed(prompt)?);
        let n = self.state.config.n_layers;
        let mut prefix = Prefix {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
            logits: Vec::new(),
        };
        let last = self.extend(&mut prefix, x)?;
        prefix.logits = self.logits(&last)?;
        Ok(prefix)
    }

    /// Feeds one more token, updating the cached logits.
    pub fn push(&self, prefix: &mut Prefix, token: usize) -> Result<()> {
        let x = self.embed(&[token])?;
        let last = self.extend(prefix, x)?;
        prefix.logits = self.logits(&last)?;
        Ok(())
    }

    /// Samples a continuation of `prefix` (which is left untouched).
    pub fn continue_from(&self, prefix: &Prefix, opts: &GenerateOptions) -> Result<Vec<usize>> {
        if !(opts.temperature >= 0.0) {
            return Err(Error::domain("temperature must be non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut p = prefix.clone();
        let mut out = Vec::new();
        let ctx = self.state.config.max_context;
        while out.len() < opts.max_new_tokens {
            let tok = pick(&p.logits, opts.temperature, &mut rng);
            if tok == opts.eos {
                break;
            }
            out.push(tok);
            if p.len >= ctx {
                break;
            }
            self.push(&mut p, tok)?;
        }
        Ok(out)
    }

    pub fn generate(&self, media: &MediaInput, prompt: &[usize], opts: &GenerateOptions) -> Result<Vec<usize>> {
        let prefix = self.prefill(media, prompt)?;
        self.continue_from(&prefix, opts)
    }

    /// Next-token log-probabilities after `prefix`.
    pub fn next_logprobs(&self, prefix: &Prefix) -> Vec<f64> {
        log_softmax_rows(&prefix.logits, 1, prefix.logits.len())
    }
}

fn pick(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let probs = softmax_rows(&scaled, 1, scaled.len(), None);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl ModelState {
    pub fn sampler(&self) -> Result<Sampler<'_>> {
        Sampler::new(self)
    }

    /// Autoregressive sampling; temperature 0 is greedy. The end token is not
    /// included in the output.
    pub fn generate(&self, media: &MediaInput, prompt: &[usize], opts: &GenerateOptions) -> Result<Vec<usize>> {
        self.sampler()?.generate(media, prompt, opts)
    }
}
