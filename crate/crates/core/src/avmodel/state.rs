use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Parameter families that training stages freeze or unfreeze together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    VisualAligner,
    AudioAligner,
    SegmentPositions,
    /// Synthetic encoders. Always frozen.
    Encoders,
    Lora,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("lora.") {
            ParamGroup::Lora
        } else if name.starts_with("vis.") {
            ParamGroup::VisualAligner
        } else if name.starts_with("aud.") {
            ParamGroup::AudioAligner
        } else if name == "seg_pos" {
            ParamGroup::SegmentPositions
        } else if name.starts_with("enc.") {
            ParamGroup::Encoders
        } else {
            ParamGroup::Backbone
        }
    }
}

/// The set of parameter groups that receive gradients.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainMask {
    groups: Vec<ParamGroup>,
}

impl TrainMask {
    pub fn frozen() -> Self {
        Self::default()
    }

    pub fn of(groups: &[ParamGroup]) -> Result<Self> {
        if groups.contains(&ParamGroup::Encoders) {
            return Err(Error::Invariant("the synthetic encoders are never trainable".into()));
        }
        let mut groups = groups.to_vec();
        groups.sort();
        groups.dedup();
        Ok(Self { groups })
    }

    pub fn contains(&self, g: ParamGroup) -> bool {
        self.groups.contains(&g)
    }

    pub fn trains(&self, name: &str) -> bool {
        self.contains(ParamGroup::of(name))
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }
}

/// Low-rank adapter over the attention projections: each adapted `W` (d x d)
/// gets `A` (d x r) and `B` (r x d), contributing `scale * A * B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub rank: usize,
    pub scale: f64,
    /// Keyed `lora.<target>.a` / `lora.<target>.b`.
    pub factors: BTreeMap<String, Tensor>,
}

impl LoraAdapter {
    pub fn a_key(target: &str) -> String {
        format!("lora.{target}.a")
    }

    pub fn b_key(target: &str) -> String {
        format!("lora.{target}.b")
    }

    pub fn factors_for(&self, target: &str) -> Option<(&Tensor, &Tensor)> {
        Some((
            self.factors.get(&Self::a_key(target))?,
            self.factors.get(&Self::b_key(target))?,
        ))
    }

    /// `scale * A * B` for one adapted weight.
    pub fn delta(&self, target: &str) -> Result<Option<Tensor>> {
        let Some((a, b)) = self.factors_for(target) else {
            return Ok(None);
        };
        let mut d = a.matmul(b)?;
        d.data_mut().iter_mut().for_each(|v| *v *= self.scale);
        Ok(Some(d))
    }
}

/// All weights of the audio-visual model plus the optional adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub weights: BTreeMap<String, Tensor>,
    pub adapter: Option<LoraAdapter>,
    /// mrDPO round index `t`.
    pub round: usize,
    /// Base seed and counter from which adapter initialisations are drawn.
    pub seed: u64,
    pub rng_counter: u64,
}

pub fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("valid std");
        t.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
    }
    t
}

impl ModelState {
    /// Names of the weights that LoRA adapts.
    pub fn lora_targets(cfg: &ModelConfig) -> Vec<String> {
        (0..cfg.n_layers)
            .flat_map(|l| {
                ["wq", "wk", "wv", "wo"]
                    .into_iter()
                    .map(move |w| format!("layers.{l}.attn.{w}"))
            })
            .collect()
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1417));
        let mut w = BTreeMap::new();
        let proj = 1.0 / (d as f64).sqrt();
        let resid = proj / (2.0 * c.n_layers as f64).sqrt();

        w.insert("tok_emb".into(), gaussian(&mut rng, c.vocab_size, d, 0.1));
        w.insert("pos_emb".into(), gaussian(&mut rng, c.max_context, d, 0.1));
        for l in 0..c.n_layers {
            let p = format!("layers.{l}");
            w.insert(format!("{p}.ln1.g"), Tensor::filled(1, d, 1.0));
            w.insert(format!("{p}.ln1.b"), Tensor::zeros(1, d));
            w.insert(format!("{p}.attn.wq"), gaussian(&mut rng, d, d, proj));
            w.insert(format!("{p}.attn.wk"), gaussian(&mut rng, d, d, proj));
            w.insert(format!("{p}.attn.wv"), gaussian(&mut rng, d, d, proj));
            w.insert(format!("{p}.attn.wo"), gaussian(&mut rng, d, d, resid));
            w.insert(format!("{p}.ln2.g"), Tensor::filled(1, d, 1.0));
            w.insert(format!("{p}.ln2.b"), Tensor::zeros(1, d));
            w.insert(format!("{p}.ffn.w1"), gaussian(&mut rng, d, c.ffn_dim, proj));
            w.insert(format!("{p}.ffn.b1"), Tensor::zeros(1, c.ffn_dim));
            let f = 1.0 / (c.ffn_dim as f64).sqrt() / (2.0 * c.n_layers as f64).sqrt();
            w.insert(format!("{p}.ffn.w2"), gaussian(&mut rng, c.ffn_dim, d, f));
            w.insert(format!("{p}.ffn.b2"), Tensor::zeros(1, d));
        }
        w.insert("ln_f.g".into(), Tensor::filled(1, d, 1.0));
        w.insert("ln_f.b".into(), Tensor::zeros(1, d));
        w.insert("head".into(), gaussian(&mut rng, d, c.vocab_size, 0.5 * proj));

        // frozen synthetic encoders: one random code per raw input unit
        w.insert("enc.visual".into(), gaussian(&mut rng, c.visual_input_dim, c.encoder_dim, 1.0));
        w.insert("enc.audio".into(), gaussian(&mut rng, c.audio_input_dim, c.encoder_dim, 1.0));

        let mut state = Self {
            config,
            weights: w,
            adapter: None,
            round: 0,
            seed,
            rng_counter: 0,
        };
        state.reset_aligner("vis", seed)?;
        state.reset_aligner("aud", seed)?;
        state.reset_segment_positions(seed);
        Ok(state)
    }

    /// Re-draws one modality aligner (`"vis"` or `"aud"`).
    pub fn reset_aligner(&mut self, prefix: &str, seed: u64) -> Result<()> {
        let tag = match prefix {
            "vis" => 0x715,
            "aud" => 0xa0d,
            other => return Err(Error::contract(format!("unknown aligner {other}"))),
        };
        let c = &self.config;
        let (d, e) = (c.model_dim, c.encoder_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, tag));
        let w1 = gaussian(&mut rng, e, d, 1.0 / (e as f64).sqrt());
        let w2 = gaussian(&mut rng, d, d, 1.0 / (d as f64).sqrt());
        self.weights.insert(format!("{prefix}.w1"), w1);
        self.weights.insert(format!("{prefix}.b1"), Tensor::zeros(1, d));
        self.weights.insert(format!("{prefix}.w2"), w2);
        self.weights.insert(format!("{prefix}.b2"), Tensor::zeros(1, d));
        Ok(())
    }

    pub fn reset_segment_positions(&mut self, seed: u64) {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5e9));
        let rows = c.max_segments * c.audio_tokens_per_segment;
        self.weights
            .insert("seg_pos".into(), gaussian(&mut rng, rows, c.encoder_dim, 0.1));
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor> {
        if ParamGroup::of(name) == ParamGroup::Lora {
            return self
                .adapter
                .as_ref()
                .and_then(|a| a.factors.get(name))
                .ok_or_else(|| Error::state(format!("no adapter weight {name}")));
        }
        self.weights
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown weight {name}")))
    }

    pub fn has_adapter(&self) -> bool {
        self.adapter.is_some()
    }

    /// Attaches a fresh adapter: `A` Gaussian, `B` zero, so the model
    /// function is unchanged.
    pub fn lora_attach(&mut self) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::state("an adapter is already attached"));
        }
        self.rng_counter += 1;
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, 0x10ea ^ self.rng_counter));
        let mut factors = BTreeMap::new();
        for t in Self::lora_targets(c) {
            factors.insert(
                LoraAdapter::a_key(&t),
                gaussian(&mut rng, c.model_dim, c.lora_rank, c.lora_init_std),
            );
            factors.insert(LoraAdapter::b_key(&t), Tensor::zeros(c.lora_rank, c.model_dim));
        }
        self.adapter = Some(LoraAdapter {
            rank: c.lora_rank,
            scale: c.lora_scale,
            factors,
        });
        Ok(())
    }

    pub fn lora_detach(&mut self) -> Result<LoraAdapter> {
        self.adapter
            .take()
            .ok_or_else(|| Error::state("no adapter attached"))
    }

    /// Folds the attached adapter into the backbone: `W <- W + scale * A * B`.
    pub fn lora_merge(&mut self) -> Result<()> {
        let adapter = self.lora_detach()?;
        for t in Self::lora_targets(&self.config) {
            if let Some(delta) = adapter.delta(&t)? {
                let w = self
                    .weights
                    .get_mut(&t)
                    .ok_or_else(|| Error::contract(format!("missing adapted weight {t}")))?;
                w.axpy(1.0, &delta)?;
            }
        }
        Ok(())
    }

    /// Mutable handles to every trainable parameter under `mask`, in name order.
    pub fn trainable_mut(&mut self, mask: &TrainMask) -> Vec<(&str, &mut Tensor)> {
        let mut out: Vec<(&str, &mut Tensor)> = self
            .weights
            .iter_mut()
            .filter(|(k, _)| mask.trains(k))
            .map(|(k, v)| (k.as_str(), v))
            .collect();
        if mask.contains(ParamGroup::Lora) {
            if let Some(a) = self.adapter.as_mut() {
                out.extend(a.factors.iter_mut().map(|(k, v)| (k.as_str(), v)));
            }
        }
        out
    }

    pub fn trainable_names(&self, mask: &TrainMask) -> Vec<String> {
        let mut names: Vec<String> =
            self.weights.keys().filter(|k| mask.trains(k)).cloned().collect();
        if mask.contains(ParamGroup::Lora) {
            if let Some(a) = &self.adapter {
                names.extend(a.factors.keys().cloned());
            }
        }
        names
    }

    /// Digest of every weight in `group`, used to assert frozen components.
    pub fn group_fingerprint(&self, group: ParamGroup) -> u64 {
        let mut h = 0x1234_5678_u64;
        let iter: Box<dyn Iterator<Item = (&String, &Tensor)>> = match group {
            ParamGroup::Lora => match &self.adapter {
                Some(a) => Box::new(a.factors.iter()),
                None => Box::new(std::iter::empty()),
            },
            _ => Box::new(self.weights.iter().filter(|(k, _)| ParamGroup::of(k) == group)),
        };
        for (k, t) in iter {
            for b in k.bytes() {
                h = mix_seed(h, b as u64);
            }
            h = mix_seed(h, t.fingerprint());
        }
        h
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.values().map(Tensor::len).sum::<usize>()
            + self
                .adapter
                .as_ref()
                .map_or(0, |a| a.factors.values().map(Tensor::len).sum())
    }
}
