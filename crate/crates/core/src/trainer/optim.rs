use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::StageConfig;
use crate::avmodel::{ModelState, ParamGroup, TrainMask};
use crate::error::{Error, Result};
use crate::losses::LossOutput;
use crate::numcore::{AdamState, Tensor};

const ALL_GROUPS: [ParamGroup; 6] = [
    ParamGroup::Backbone,
    ParamGroup::VisualAligner,
    ParamGroup::AudioAligner,
    ParamGroup::SegmentPositions,
    ParamGroup::Encoders,
    ParamGroup::Lora,
];

/// Fingerprints of every group the mask leaves frozen.
pub fn frozen_fingerprints(state: &ModelState, mask: &TrainMask) -> BTreeMap<ParamGroup, u64> {
    ALL_GROUPS
        .into_iter()
        .filter(|g| !mask.contains(*g))
        .map(|g| (g, state.group_fingerprint(g)))
        .collect()
}

pub fn check_frozen(state: &ModelState, before: &BTreeMap<ParamGroup, u64>, stage: &str) -> Result<()> {
    for (g, fp) in before {
        if state.group_fingerprint(*g) != *fp {
            return Err(Error::invariant(format!("{stage}: frozen group {g:?} changed")));
        }
    }
    Ok(())
}

/// Cycles through shuffled epochs of `n` item indices.
pub struct BatchCursor {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchCursor {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::domain("no training items"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Self { order, pos: 0, rng })
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn clip_grads(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .values()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Runs `cfg.steps` optimizer steps. `step_loss` sees the current state and
/// the step index and returns the batch loss with gradients. Returns the
/// loss curve. Gradients on parameters outside `mask` are an invariant
/// violation, as is any change to a frozen group.
pub fn optimize<F>(state: &mut ModelState, mask: &TrainMask, cfg: &StageConfig, stage: &str, mut step_loss: F) -> Result<Vec<f64>>
where
    F: FnMut(&ModelState, usize) -> Result<LossOutput>,
{
    let trainable: BTreeSet<String> = state.trainable_names(mask).into_iter().collect();
    if trainable.is_empty() {
        return Err(Error::invariant(format!("{stage}: nothing to train")));
    }
    let frozen = frozen_fingerprints(state, mask);
    let mut adam = AdamState::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let out = step_loss(state, step)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        if let Some(bad) = out.grads.keys().find(|k| !trainable.contains(*k)) {
            return Err(Error::invariant(format!("{stage}: gradient reached frozen parameter {bad}")));
        }
        let mut grads = out.grads;
        for (name, p) in state.trainable_mut(mask) {
            grads
                .entry(name.to_string())
                .or_insert_with(|| Tensor::new(p.shape().to_vec(), vec![0.0; p.len()]).expect("shape matches data"));
        }
        clip_grads(&mut grads, cfg.clip);
        adam.step(state.trainable_mut(mask), &grads)?;
        curve.push(out.loss);
        if step % 50 == 0 || step + 1 == cfg.steps {
            log::debug!("{stage} step {step}: loss {:.4}", out.loss);
        }
    }
    check_frozen(state, &frozen, stage)?;
    Ok(curve)
}
