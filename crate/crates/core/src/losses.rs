//! Preference and supervised objectives: DPO, guided DPO (DPO plus a
//! ground-truth likelihood term), cDPO (likelihood on the chosen sample) and
//! teacher-forced cross-entropy.
//!
//! Every loss is evaluated one example per graph so examples can be processed
//! in parallel; per-example gradients are summed in input order.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::avmodel::{Binder, MediaInput, ModelState, TrainMask};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::par;

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// A prompt and a teacher-forced target for one video.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub media: Arc<MediaInput>,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PreferenceItem {
    pub media: Arc<MediaInput>,
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PreferenceBatch {
    pub items: Vec<PreferenceItem>,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct GuidedBatch {
    pub pref: PreferenceBatch,
    pub gt: Vec<Sequence>,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dpo,
    Gdpo,
    Cdpo,
    Sft,
}

/// Value, decomposition and parameter gradients of a batch loss.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Mean preference term (0 for SFT).
    pub preference: f64,
    /// Mean likelihood term before weighting (0 when unused).
    pub nll: f64,
    pub grads: BTreeMap<String, Tensor>,
}

/// `-log sigmoid(beta * ((lp_c - ref_c) - (lp_r - ref_r)))` for one pair.
pub fn dpo_pair_loss(lp_c: f64, lp_r: f64, ref_c: f64, ref_r: f64, beta: f64) -> f64 {
    let z = beta * ((lp_c - ref_c) - (lp_r - ref_r));
    -crate::numcore::log_sigmoid(z)
}

/// Graph form of [`dpo_pair_loss`] with the reference terms as constants.
pub fn dpo_pair_graph(g: &mut Graph, lp_c: Var, lp_r: Var, ref_c: f64, ref_r: f64, beta: f64) -> Result<Var> {
    let d = g.sub(lp_c, lp_r)?;
    let d = g.add_scalar(d, -(ref_c - ref_r))?;
    let z = g.scale(d, beta)?;
    let ls = g.log_sigmoid(z)?;
    g.scale(ls, -1.0)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::domain(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::domain(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(())
}

fn seq_logprob(b: &mut Binder, g: &mut Graph, media: &MediaInput, prompt: &[usize], target: &[usize]) -> Result<Var> {
    let lp = b
        .target_logprobs(g, media, prompt, target)?
        .ok_or_else(|| Error::domain("empty target sequence"))?;
    g.sum(lp)
}

/// Summed log-probabilities of chosen and rejected under a frozen model.
pub fn reference_logprobs(reference: &ModelState, batch: &PreferenceBatch) -> Result<Vec<(f64, f64)>> {
    par::try_map(&batch.items, |_, it| {
        Ok((
            reference.sequence_logprob(&it.media, &it.prompt, &it.chosen)?,
            reference.sequence_logprob(&it.media, &it.prompt, &it.rejected)?,
        ))
    })
}

enum Job<'a> {
    Pair(&'a PreferenceItem, (f64, f64)),
    Nll(&'a MediaInput, &'a [usize], &'a [usize]),
    TokenNll(&'a Sequence),
}

struct Part {
    value: f64,
    grads: BTreeMap<String, Tensor>,
}

fn run_jobs(policy: &ModelState, mask: &TrainMask, jobs: &[(Job, f64)], beta: f64) -> Result<Vec<Part>> {
    par::try_map(jobs, |_, (job, weight)| {
        let mut g = Graph::new();
        let mut b = Binder::new(policy, mask);
        let v = match job {
            Job::Pair(it, (rc, rr)) => {
                let c = seq_logprob(&mut b, &mut g, &it.media, &it.prompt, &it.chosen)?;
                let r = seq_logprob(&mut b, &mut g, &it.media, &it.prompt, &it.rejected)?;
                dpo_pair_graph(&mut g, c, r, *rc, *rr, beta)?
            }
            Job::Nll(media, prompt, target) => {
                let lp = seq_logprob(&mut b, &mut g, media, prompt, target)?;
                g.scale(lp, -1.0)?
            }
            Job::TokenNll(s) => {
                let lp = b
                    .target_logprobs(&mut g, &s.media, &s.prompt, &s.target)?
                    .ok_or_else(|| Error::domain("empty target sequence"))?;
                let m = g.mean(lp)?;
                g.scale(m, -1.0)?
            }
        };
        let value = g.scalar_value(v)?;
        let grads = if *weight != 0.0 && g.is_tracked(v) {
            let w = g.scale(v, *weight)?;
            g.backward(w)?.into_params()
        } else {
            BTreeMap::new()
        };
        Ok(Part { value, grads })
    })
}

fn accumulate(parts: &[Part]) -> BTreeMap<String, Tensor> {
    let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
    for p in parts {
        for (k, t) in &p.grads {
            match out.get_mut(k) {
                Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                None => {
                    out.insert(k.clone(), t.clone());
                }
            }
        }
    }
    out
}

fn mean(xs: &[Part]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().map(|p| p.value).sum::<f64>() / xs.len() as f64
    }
}

/// Preference loss plus `lambda` times the mean summed NLL of `extra`.
fn preference_with_nll(
    policy: &ModelState,
    mask: &TrainMask,
    batch: &PreferenceBatch,
    ref_lp: &[(f64, f64)],
    extra: Vec<(&MediaInput, &[usize], &[usize])>,
    lambda: f64,
) -> Result<LossOutput> {
    check_beta(batch.beta)?;
    check_lambda(lambda)?;
    if batch.items.is_empty() {
        return Err(Error::domain("empty preference batch"));
    }
    if ref_lp.len() != batch.items.len() {
        return Err(Error::contract(format!(
            "{} reference scores for {} pairs",
            ref_lp.len(),
            batch.items.len()
        )));
    }
    let n = batch.items.len();
    let mut jobs: Vec<(Job, f64)> = batch
        .items
        .iter()
        .zip(ref_lp)
        .map(|(it, r)| (Job::Pair(it, *r), 1.0 / n as f64))
        .collect();
    let m = extra.len();
    if lambda > 0.0 {
        if m == 0 {
            return Err(Error::domain("likelihood term needs at least one sequence"));
        }
        jobs.extend(extra.into_iter().map(|(md, p, t)| (Job::Nll(md, p, t), lambda / m as f64)));
    }
    let parts = run_jobs(policy, mask, &jobs, batch.beta)?;
    let preference = mean(&parts[..n]);
    let nll = mean(&parts[n..]);
    let loss = if lambda > 0.0 { preference + lambda * nll } else { preference };
    Ok(LossOutput {
        loss,
        preference,
        nll,
        grads: accumulate(&parts),
    })
}

/// Mean DPO loss over the batch; `ref_lp` comes from [`reference_logprobs`].
pub fn dpo_loss(policy: &ModelState, mask: &TrainMask, batch: &PreferenceBatch, ref_lp: &[(f64, f64)]) -> Result<LossOutput> {
    preference_with_nll(policy, mask, batch, ref_lp, Vec::new(), 0.0)
}

/// DPO plus `lambda` times the mean sequence NLL (summed over tokens) of the ground-truth captions.
pub fn gdpo_loss(policy: &ModelState, mask: &TrainMask, batch: &GuidedBatch, ref_lp: &[(f64, f64)]) -> Result<LossOutput> {
    let extra = batch
        .gt
        .iter()
        .map(|s| (&*s.media, s.prompt.as_slice(), s.target.as_slice()))
        .collect();
    preference_with_nll(policy, mask, &batch.pref, ref_lp, extra, batch.lambda)
}

/// DPO plus `lambda` times the mean sequence NLL of the chosen captions.
pub fn cdpo_loss(
    policy: &ModelState,
    mask: &TrainMask,
    batch: &PreferenceBatch,
    lambda: f64,
    ref_lp: &[(f64, f64)],
) -> Result<LossOutput> {
    let extra = batch
        .items
        .iter()
        .map(|it| (&*it.media, it.prompt.as_slice(), it.chosen.as_slice()))
        .collect();
    preference_with_nll(policy, mask, batch, ref_lp, extra, lambda)
}

/// Mean over the batch of each sequence's per-token NLL.
pub fn sft_loss(policy: &ModelState, mask: &TrainMask, batch: &[Sequence]) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    if batch.iter().any(|s| s.target.is_empty()) {
        return Err(Error::domain("empty target sequence"));
    }
    let w = 1.0 / batch.len() as f64;
    let jobs: Vec<(Job, f64)> = batch.iter().map(|s| (Job::TokenNll(s), w)).collect();
    let parts = run_jobs(policy, mask, &jobs, 1.0)?;
    let nll = mean(&parts);
    Ok(LossOutput {
        loss: nll,
        preference: 0.0,
        nll,
        grads: accumulate(&parts),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avmodel::{AudioSegments, FrameFeatures, ModelConfig, ParamGroup};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 17,
            model_dim: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            max_context: 48,
            max_frames: 8,
            audio_tokens_per_segment: 2,
            audio_segment_len: 2.0,
            max_segments: 4,
            visual_input_dim: 4,
            audio_input_dim: 3,
            encoder_dim: 5,
            lora_rank: 2,
            ..ModelConfig::default()
        }
    }

    fn media(rng: &mut ChaCha8Rng, c: &ModelConfig) -> Arc<MediaInput> {
        let mut t = |r: usize, k: usize| Tensor::matrix(r, k, (0..r * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let frames = FrameFeatures::new(t(3, c.visual_input_dim), vec![0.5, 1.5, 2.5]).unwrap();
        let audio = AudioSegments {
            segments: vec![t(2, c.audio_input_dim), t(2, c.audio_input_dim)],
        };
        Arc::new(MediaInput {
            frames: Some(frames),
            audio: Some(audio),
        })
    }

    fn toks(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..17)).collect()
    }

    fn setup(seed: u64, pairs: usize) -> (ModelState, PreferenceBatch, Vec<Sequence>) {
        let c = cfg();
        let mut state = ModelState::init(c.clone(), seed).unwrap();
        state.lora_attach().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let items = (0..pairs)
            .map(|_| PreferenceItem {
                media: media(&mut rng, &c),
                prompt: toks(&mut rng, 2),
                chosen: toks(&mut rng, 4),
                rejected: toks(&mut rng, 5),
            })
            .collect();
        let gt = (0..2)
            .map(|_| Sequence {
                media: media(&mut rng, &c),
                prompt: toks(&mut rng, 1),
                target: toks(&mut rng, 3),
            })
            .collect();
        (state, PreferenceBatch { items, beta: 0.1 }, gt)
    }

    fn lora_mask() -> TrainMask {
        TrainMask::of(&[ParamGroup::Lora]).unwrap()
    }

    fn randomize_b(state: &mut ModelState, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (k, t) in state.adapter.as_mut().unwrap().factors.iter_mut() {
            if k.ends_with(".b") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            }
        }
    }

    #[test]
    fn identity_at_reference() {
        let (state, batch, _) = setup(1, 3);
        let r = reference_logprobs(&state, &batch).unwrap();
        let out = dpo_loss(&state, &lora_mask(), &batch, &r).unwrap();
        assert!((out.loss - LN2).abs() < 1e-9);
        for it in &batch.items {
            let single = PreferenceBatch {
                items: vec![it.clone()],
                beta: 0.1,
            };
            let r1 = reference_logprobs(&state, &single).unwrap();
            assert!((dpo_loss(&state, &lora_mask(), &single, &r1).unwrap().loss - LN2).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_is_mean_of_pairs() {
        let (mut state, batch, _) = setup(2, 2);
        let reference = state.clone();
        randomize_b(&mut state, 9);
        let r = reference_logprobs(&reference, &batch).unwrap();
        let both = dpo_loss(&state, &lora_mask(), &batch, &r).unwrap().loss;
        let singles: Vec<f64> = (0..2)
            .map(|i| {
                let b = PreferenceBatch {
                    items: vec![batch.items[i].clone()],
                    beta: 0.1,
                };
                dpo_loss(&state, &lora_mask(), &b, &r[i..=i]).unwrap().loss
            })
            .collect();
        assert!((both - (singles[0] + singles[1]) / 2.0).abs() < 1e-12);
        assert!((both - LN2).abs() > 1e-6);
    }

    #[test]
    fn pair_gradient_signs() {
        let mut g = Graph::new();
        let c = g.leaf(Tensor::scalar(-3.0));
        let r = g.leaf(Tensor::scalar(-3.5));
        let l = dpo_pair_graph(&mut g, c, r, -3.0, -3.5, 0.1).unwrap();
        assert!((g.scalar_value(l).unwrap() - LN2).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        let gc = grads.wrt(c).unwrap().item().unwrap();
        let gr = grads.wrt(r).unwrap().item().unwrap();
        assert!(gc < 0.0 && gr > 0.0);
        assert!((gc + 0.05).abs() < 1e-12 && (gr - 0.05).abs() < 1e-12);
        let h = 1e-5;
        let fd = (dpo_pair_loss(-3.0 + h, -3.5, -3.0, -3.5, 0.1) - dpo_pair_loss(-3.0 - h, -3.5, -3.0, -3.5, 0.1)) / (2.0 * h);
        assert!((fd - gc).abs() < 1e-9);
    }

    #[test]
    fn beta_and_lambda_validated() {
        let (state, mut batch, gt) = setup(3, 1);
        let r = reference_logprobs(&state, &batch).unwrap();
        batch.beta = 0.0;
        assert!(matches!(dpo_loss(&state, &lora_mask(), &batch, &r), Err(Error::Domain(_))));
        batch.beta = 0.1;
        let gb = GuidedBatch {
            pref: batch,
            gt,
            lambda: -1.0,
        };
        assert!(gdpo_loss(&state, &lora_mask(), &gb, &r).is_err());
    }

    #[test]
    fn guided_decomposition() {
        let (mut state, batch, gt) = setup(4, 2);
        let reference = state.clone();
        randomize_b(&mut state, 5);
        let r = reference_logprobs(&reference, &batch).unwrap();
        let mask = lora_mask();
        let dpo = dpo_loss(&state, &mask, &batch, &r).unwrap();
        let g0 = gdpo_loss(
            &state,
            &mask,
            &GuidedBatch {
                pref: batch.clone(),
                gt: gt.clone(),
                lambda: 0.0,
            },
            &r,
        )
        .unwrap();
        assert!((g0.loss - dpo.loss).abs() < 1e-12);
        let g1 = gdpo_loss(
            &state,
            &mask,
            &GuidedBatch {
                pref: batch.clone(),
                gt: gt.clone(),
                lambda: 0.1,
            },
            &r,
        )
        .unwrap();
        let nll: f64 = gt
            .iter()
            .map(|s| -state.sequence_logprob(&s.media, &s.prompt, &s.target).unwrap())
            .sum::<f64>()
            / gt.len() as f64;
        assert!((g1.loss - (dpo.loss + 0.1 * nll)).abs() < 1e-12);
        // cDPO with the chosen captions as ground truth is gDPO
        let as_gt: Vec<Sequence> = batch
            .items
            .iter()
            .map(|it| Sequence {
                media: it.media.clone(),
                prompt: it.prompt.clone(),
                target: it.chosen.clone(),
            })
            .collect();
        let gc = gdpo_loss(
            &state,
            &mask,
            &GuidedBatch {
                pref: batch.clone(),
                gt: as_gt,
                lambda: 0.1,
            },
            &r,
        )
        .unwrap();
        let c = cdpo_loss(&state, &mask, &batch, 0.1, &r).unwrap();
        assert!((gc.loss - c.loss).abs() < 1e-12);
        assert!((cdpo_loss(&state, &mask, &batch, 0.0, &r).unwrap().loss - dpo.loss).abs() < 1e-12);
    }

    #[test]
    fn guided_at_reference() {
        let (state, batch, gt) = setup(6, 1);
        let r = reference_logprobs(&state, &batch).unwrap();
        let q = state.sequence_logprob(&gt[0].media, &gt[0].prompt, &gt[0].target).unwrap();
        let out = gdpo_loss(
            &state,
            &lora_mask(),
            &GuidedBatch {
                pref: batch,
                gt: gt[..1].to_vec(),
                lambda: 0.1,
            },
            &r,
        )
        .unwrap();
        assert!((out.loss - (LN2 + 0.1 * -q)).abs() < 1e-9);
    }

    #[test]
    fn grads_only_for_policy_params() {
        let (state, batch, gt) = setup(7, 2);
        let r = reference_logprobs(&state, &batch).unwrap();
        let mask = lora_mask();
        let out = gdpo_loss(
            &state,
            &mask,
            &GuidedBatch {
                pref: batch,
                gt,
                lambda: 0.1,
            },
            &r,
        )
        .unwrap();
        assert!(!out.grads.is_empty());
        assert!(out.grads.keys().all(|k| mask.trains(k)));
    }

    #[test]
    fn raising_chosen_lowers_loss() {
        let (mut state, batch, _) = setup(8, 1);
        let mask = lora_mask();
        let r = reference_logprobs(&state, &batch).unwrap();
        randomize_b(&mut state, 3);
        let before = dpo_loss(&state, &mask, &batch, &r).unwrap();
        // one small step along the chosen log-prob gradient only
        let it = &batch.items[0];
        let mut g = Graph::new();
        let mut b = Binder::new(&state, &mask);
        let lp = seq_logprob(&mut b, &mut g, &it.media, &it.prompt, &it.chosen).unwrap();
        let up = g.backward(lp).unwrap().into_params();
        let lp_c0 = state.sequence_logprob(&it.media, &it.prompt, &it.chosen).unwrap();
        let lp_r0 = state.sequence_logprob(&it.media, &it.prompt, &it.rejected).unwrap();
        let raised = dpo_pair_loss(lp_c0 + 0.5, lp_r0, r[0].0, r[0].1, 0.1);
        assert!(raised < before.loss);
        assert!(up.keys().all(|k| mask.trains(k)));
    }

    #[test]
    fn sft_examples() {
        let c = cfg();
        let mut state = ModelState::init(c.clone(), 3).unwrap();
        state.weights.get_mut("head").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Sequence {
            media: media(&mut rng, &c),
            prompt: vec![1, 2],
            target: vec![3, 4, 5],
        };
        let mask = TrainMask::of(&[ParamGroup::Backbone]).unwrap();
        let out = sft_loss(&state, &mask, std::slice::from_ref(&s)).unwrap();
        assert!((out.loss - (c.vocab_size as f64).ln()).abs() < 1e-9);
        let state = ModelState::init(c, 4).unwrap();
        let out = sft_loss(&state, &mask, std::slice::from_ref(&s)).unwrap();
        let lp = state.sequence_logprob(&s.media, &s.prompt, &s.target).unwrap();
        assert!((out.loss + lp / 3.0).abs() < 1e-12);
        let empty = Sequence { target: vec![], ..s };
        assert!(matches!(sft_loss(&state, &mask, &[empty]), Err(Error::Domain(_))));
    }

    #[test]
    fn sft_gradient_matches_finite_difference() {
        let c = cfg();
        let mut state = ModelState::init(c.clone(), 5).unwrap();
        state.lora_attach().unwrap();
        randomize_b(&mut state, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch: Vec<Sequence> = (0..2)
            .map(|_| Sequence {
                media: media(&mut rng, &c),
                prompt: toks(&mut rng, 2),
                target: toks(&mut rng, 3),
            })
            .collect();
        let mask = TrainMask::of(&[ParamGroup::Lora, ParamGroup::AudioAligner]).unwrap();
        let out = sft_loss(&state, &mask, &batch).unwrap();
        for name in ["lora.layers.0.attn.wq.a", "aud.w1"] {
            let analytic = out.grads[name].data()[1];
            let h = 1e-5;
            let eval = |delta: f64| {
                let mut s = state.clone();
                if let Some(t) = s.weights.get_mut(name) {
                    t.data_mut()[1] += delta;
                } else {
                    s.adapter.as_mut().unwrap().factors.get_mut(name).unwrap().data_mut()[1] += delta;
                }
                sft_loss(&s, &mask, &batch).unwrap().loss
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - analytic).abs() <= 1e-6 * (1.0 + fd.abs()), "{name}: {fd} vs {analytic}");
        }
    }

    proptest! {
        #[test]
        fn pair_loss_monotone(lc in -20.0f64..0.0, lr in -20.0f64..0.0, up in 0.01f64..5.0, beta in 0.01f64..2.0) {
            let base = dpo_pair_loss(lc, lr, -5.0, -6.0, beta);
            prop_assert!(dpo_pair_loss(lc + up, lr, -5.0, -6.0, beta) < base);
            prop_assert!(dpo_pair_loss(lc, lr + up, -5.0, -6.0, beta) > base);
        }
    }
}
