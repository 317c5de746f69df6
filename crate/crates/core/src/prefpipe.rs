//! Preference-pair construction: sample two captions per video and task,
//! score them with the deterministic judge and keep the pairs whose gaps
//! clear the round's thresholds.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avmodel::{mix_seed, GenerateOptions, ModelState, Sampler};
use crate::error::{Error, Result};
use crate::metrics::{miss_hall, repetition_rate, EvalReport, Task, UnnaturalDetector};
use crate::synthcorpus::{caption_event_set, task_prompt, EventVocab, PreparedCorpus, SyntheticVideo, Tokenizer};
use crate::par;

/// Scores of one caption for one task.
pub type JudgeVerdict = EvalReport;

/// Slack used when comparing metric gaps against thresholds, so that a gap
/// of exactly the threshold survives floating-point subtraction.
pub const GAP_EPS: f64 = 1e-9;

const SHIPPED_SCHEDULE: &str = include_str!("../data/thresholds.toml");

/// Deterministic caption judge over the synthetic event vocabulary.
#[derive(Debug, Clone)]
pub struct Judge {
    pub vocab: EventVocab,
    pub detector: UnnaturalDetector,
}

impl Judge {
    pub fn new(vocab: EventVocab, detector: UnnaturalDetector) -> Self {
        Self { vocab, detector }
    }

    pub fn judge(&self, caption: &str, video: &SyntheticVideo, task: &Task) -> Result<JudgeVerdict> {
        let gt = match task.interval() {
            None => video.event_ids(),
            Some((a, b)) => video.local_event_ids(a, b)?,
        };
        let found = caption_event_set(caption, &self.vocab);
        let (miss, hall) = miss_hall(&found, &gt)?;
        Ok(EvalReport::new(
            repetition_rate(caption),
            miss,
            hall,
            self.detector.is_unnatural(caption),
        ))
    }
}

/// Minimum rejected-minus-chosen gaps for one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundThresholds {
    pub de_global: f64,
    pub dr_global: f64,
    pub de_local: f64,
    pub dr_local: f64,
}

impl RoundThresholds {
    /// `(min error gap, min repetition gap)` for the task kind.
    pub fn for_task(&self, task: &Task) -> (f64, f64) {
        if task.is_global() {
            (self.de_global, self.dr_global)
        } else {
            (self.de_local, self.dr_local)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub round: usize,
    #[serde(flatten)]
    pub thresholds: RoundThresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub round: Vec<ScheduleRow>,
}

impl ThresholdSchedule {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Config(format!("threshold schedule: {e}")))?;
        for (i, row) in s.round.iter().enumerate() {
            if row.round != i + 1 {
                return Err(Error::Config(format!("schedule row {} is labelled round {}", i + 1, row.round)));
            }
            let t = row.thresholds;
            if ![t.de_global, t.dr_global, t.de_local, t.dr_local].iter().all(|v| v.is_finite()) {
                return Err(Error::Config(format!("round {} has a non-finite threshold", row.round)));
            }
        }
        if s.round.is_empty() {
            return Err(Error::Config("threshold schedule has no rounds".into()));
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// The schedule shipped with the crate.
    pub fn shipped() -> Self {
        Self::from_toml(SHIPPED_SCHEDULE).expect("shipped schedule parses")
    }

    pub fn shipped_text() -> &'static str {
        SHIPPED_SCHEDULE
    }

    pub fn len(&self) -> usize {
        self.round.len()
    }

    pub fn is_empty(&self) -> bool {
        self.round.is_empty()
    }

    /// Thresholds of the 1-based `round`.
    pub fn get(&self, round: usize) -> Result<RoundThresholds> {
        round
            .checked_sub(1)
            .and_then(|i| self.round.get(i))
            .map(|r| r.thresholds)
            .ok_or_else(|| Error::Config(format!("no thresholds for round {round} (schedule has {})", self.len())))
    }
}

/// Two judged samples for the same video and task, in sampling order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub video_id: String,
    pub task: Task,
    pub a: String,
    pub b: String,
    pub va: JudgeVerdict,
    pub vb: JudgeVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PairRecord", try_from = "PairRecord")]
pub struct PreferencePair {
    pub video_id: String,
    pub task: Task,
    pub chosen: String,
    pub rejected: String,
    pub chosen_verdict: JudgeVerdict,
    pub rejected_verdict: JudgeVerdict,
}

#[derive(Serialize, Deserialize)]
struct Verdicts {
    chosen: JudgeVerdict,
    rejected: JudgeVerdict,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    video_id: String,
    task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    interval: Option<[f64; 2]>,
    chosen: String,
    rejected: String,
    verdicts: Verdicts,
}

impl From<PreferencePair> for PairRecord {
    fn from(p: PreferencePair) -> Self {
        Self {
            video_id: p.video_id,
            task: if p.task.is_global() { "global" } else { "local" }.into(),
            interval: p.task.interval().map(|(a, b)| [a, b]),
            chosen: p.chosen,
            rejected: p.rejected,
            verdicts: Verdicts {
                chosen: p.chosen_verdict,
                rejected: p.rejected_verdict,
            },
        }
    }
}

impl TryFrom<PairRecord> for PreferencePair {
    type Error = String;

    fn try_from(r: PairRecord) -> std::result::Result<Self, String> {
        let task = match (r.task.as_str(), r.interval) {
            ("global", None) => Task::Global,
            ("local", Some([start, end])) => Task::Local { start, end },
            (t, i) => return Err(format!("inconsistent task {t:?} with interval {i:?}")),
        };
        Ok(Self {
            video_id: r.video_id,
            task,
            chosen: r.chosen,
            rejected: r.rejected,
            chosen_verdict: r.verdicts.chosen,
            rejected_verdict: r.verdicts.rejected,
        })
    }
}

/// Orients each pair so the lower-error caption is chosen and keeps it when
/// both the error gap and the repetition gap reach the task's thresholds.
/// Identical captions and ties in total error are dropped.
pub fn select_pairs(scored: &[ScoredPair], th: &RoundThresholds) -> Vec<PreferencePair> {
    let mut out = Vec::new();
    for p in scored {
        if p.a == p.b {
            continue;
        }
        let a_first = p.va.total_rate <= p.vb.total_rate;
        let (c, vc, r, vr) = if a_first {
            (&p.a, &p.va, &p.b, &p.vb)
        } else {
            (&p.b, &p.vb, &p.a, &p.va)
        };
        let (min_de, min_dr) = th.for_task(&p.task);
        let de = vr.total_rate - vc.total_rate;
        let dr = vr.repetition_rate - vc.repetition_rate;
        if de > 0.0 && de >= min_de - GAP_EPS && dr >= min_dr - GAP_EPS {
            out.push(PreferencePair {
                video_id: p.video_id.clone(),
                task: p.task,
                chosen: c.clone(),
                rejected: r.clone(),
                chosen_verdict: *vc,
                rejected_verdict: *vr,
            });
        }
    }
    out
}

/// Two independent samples for one prompt, sharing the encoded prefix.
pub fn sample_pair(
    sampler: &Sampler,
    tok: &Tokenizer,
    media: &crate::avmodel::MediaInput,
    task: &Task,
    temperature: f64,
    seeds: (u64, u64),
    max_new_tokens: usize,
) -> Result<(String, String)> {
    if seeds.0 == seeds.1 {
        return Err(Error::contract("pair sampling needs two distinct seeds"));
    }
    let prefix = sampler.prefill(media, &task_prompt(tok, task)?)?;
    let run = |seed| {
        let opts = GenerateOptions {
            temperature,
            seed,
            max_new_tokens,
            eos: tok.eos(),
        };
        sampler.continue_from(&prefix, &opts).map(|ids| tok.decode(&ids))
    };
    Ok((run(seeds.0)?, run(seeds.1)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Global and local pairs drawn per video and round.
    pub pairs_per_video: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_new_tokens: 40,
            seed: 0,
            pairs_per_video: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub global_pool: usize,
    pub local_pool: usize,
    pub degenerate: usize,
    pub global_selected: usize,
    pub local_selected: usize,
}

#[derive(Debug, Clone)]
pub struct RoundDataset {
    pub pairs: Vec<PreferencePair>,
    pub stats: PoolStats,
}

/// Samples, judges and selects `pairs_per_video` global and local pairs per video.
/// Deterministic given the model, corpus, round and `cfg.seed`.
pub fn build_round_dataset(
    model: &ModelState,
    tok: &Tokenizer,
    judge: &Judge,
    corpus: &PreparedCorpus,
    round: usize,
    th: &RoundThresholds,
    cfg: &PairConfig,
) -> Result<RoundDataset> {
    if corpus.is_empty() {
        return Err(Error::domain("empty corpus"));
    }
    let sampler = model.sampler()?;
    let round_seed = mix_seed(cfg.seed, round as u64);
    if cfg.pairs_per_video == 0 {
        return Err(Error::domain("pairs_per_video must be positive"));
    }
    let scored: Vec<Vec<ScoredPair>> = par::try_map(&corpus.videos, |i, video| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(round_seed, i as u64));
        let mut out = Vec::with_capacity(2 * cfg.pairs_per_video);
        for _ in 0..cfg.pairs_per_video {
            let (start, end) = video.sample_interval(&mut rng);
            for task in [Task::Global, Task::Local { start, end }] {
                let s0 = rng.next_u64();
                let s1 = rng.next_u64() | 1;
                let s0 = if s0 == s1 { s0 ^ 2 } else { s0 };
                let (a, b) = sample_pair(&sampler, tok, &corpus.media[i], &task, cfg.temperature, (s0, s1), cfg.max_new_tokens)?;
                out.push(ScoredPair {
                    video_id: video.id.clone(),
                    task,
                    va: judge.judge(&a, video, &task)?,
                    vb: judge.judge(&b, video, &task)?,
                    a,
                    b,
                });
            }
        }
        Ok::<_, Error>(out)
    })?;
    let (global, local): (Vec<ScoredPair>, Vec<ScoredPair>) =
        scored.into_iter().flatten().partition(|p| p.task.is_global());
    let degenerate = global.iter().chain(&local).filter(|p| p.a == p.b).count();
    let sel_g = select_pairs(&global, th);
    let sel_l = select_pairs(&local, th);
    let stats = PoolStats {
        global_pool: global.len(),
        local_pool: local.len(),
        degenerate,
        global_selected: sel_g.len(),
        local_selected: sel_l.len(),
    };
    let mut pairs = sel_g;
    pairs.extend(sel_l);
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(round_seed, u64::MAX)));
    if pairs.is_empty() {
        log::warn!("round {round}: no pair cleared the thresholds");
    }
    Ok(RoundDataset { pairs, stats })
}

pub fn write_pairs_jsonl(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs_jsonl(path: &Path) -> Result<Vec<PreferencePair>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avmodel::ModelConfig;
    use crate::synthcorpus::{gen_corpus, CorpusConfig, TimedEvent};
    use proptest::prelude::*;

    fn verdict(total: f64, rep: f64) -> JudgeVerdict {
        EvalReport::new(rep, total, 0.0, false)
    }

    fn pair(task: Task, a: (f64, f64), b: (f64, f64)) -> ScoredPair {
        ScoredPair {
            video_id: "v".into(),
            task,
            a: "a".into(),
            b: "b".into(),
            va: verdict(a.0, a.1),
            vb: verdict(b.0, b.1),
        }
    }

    fn brute(scored: &[ScoredPair], th: &RoundThresholds) -> Vec<PreferencePair> {
        let mut out = Vec::new();
        for p in scored {
            for (c, vc, r, vr) in [(&p.a, &p.va, &p.b, &p.vb), (&p.b, &p.vb, &p.a, &p.va)] {
                let (de, dr) = th.for_task(&p.task);
                let ok = c != r
                    && vc.total_rate < vr.total_rate
                    && vr.total_rate - vc.total_rate + GAP_EPS >= de
                    && vr.repetition_rate - vc.repetition_rate + GAP_EPS >= dr;
                if ok {
                    out.push(PreferencePair {
                        video_id: p.video_id.clone(),
                        task: p.task,
                        chosen: c.clone(),
                        rejected: r.clone(),
                        chosen_verdict: *vc,
                        rejected_verdict: *vr,
                    });
                }
            }
        }
        out
    }

    fn video() -> SyntheticVideo {
        let v = EventVocab::default();
        let ev = |p: &str, t: f64| TimedEvent {
            id: v.id_of(p).unwrap().into(),
            phrase: p.into(),
            t,
        };
        SyntheticVideo::new(
            "x".into(),
            10.0,
            vec![ev("red square", 1.5), ev("blue star", 6.5)],
            vec![ev("loud bell", 2.5), ev("soft drum", 8.5)],
        )
        .unwrap()
    }

    #[test]
    fn shipped_schedule_matches_table() {
        let s = ThresholdSchedule::shipped();
        assert_eq!(s.len(), 7);
        let r1 = s.get(1).unwrap();
        assert_eq!((r1.de_global, r1.dr_global, r1.de_local, r1.dr_local), (0.05, 0.01, 0.20, 0.01));
        let r2 = s.get(2).unwrap();
        assert_eq!((r2.de_global, r2.dr_global, r2.de_local, r2.dr_local), (0.20, -0.01, 0.45, 0.0));
        assert_eq!(s.get(6).unwrap().de_global, 0.25);
        assert_eq!(s.get(7).unwrap().de_global, 0.30);
        assert!(s.get(0).is_err() && s.get(8).is_err());
        assert!(ThresholdSchedule::from_toml("[[round]]\nround = 2\nde_global = 0.1\ndr_global = 0\nde_local = 0\ndr_local = 0\n").is_err());
    }

    #[test]
    fn judge_examples() {
        let j = Judge::new(EventVocab::default(), UnnaturalDetector::default());
        let v = video();
        let g = j.judge(&v.caption, &v, &Task::Global).unwrap();
        assert_eq!((g.miss_rate, g.hall_rate, g.repetition_rate), (0.0, 0.0, 0.0));
        let e = j.judge("", &v, &Task::Global).unwrap();
        assert_eq!(e.miss_rate, 1.0);
        let w = j.judge("red square. loud bell. green star. soft drum.", &v, &Task::Global).unwrap();
        assert_eq!((w.miss_rate, w.hall_rate), (0.25, 0.25));
        assert_eq!(w.total_rate, 0.5);
        let l = j.judge("loud bell. blue star.", &v, &Task::Local { start: 2.0, end: 5.0 }).unwrap();
        assert_eq!((l.miss_rate, l.hall_rate), (0.0, 1.0));
        assert!(j.judge("#audio: loud bell.", &v, &Task::Global).unwrap().unnatural);
    }

    #[test]
    fn selection_examples() {
        let th = ThresholdSchedule::shipped().get(2).unwrap();
        let kept = select_pairs(&[pair(Task::Global, (0.5, 0.1), (0.25, 0.1))], &th);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].chosen, "b");
        assert_eq!(select_pairs(&[pair(Task::Global, (0.3, 0.0), (0.3, 0.0))], &th).len(), 0);
        let mut same = pair(Task::Global, (0.0, 0.0), (0.9, 0.0));
        same.b = same.a.clone();
        assert!(select_pairs(&[same], &th).is_empty());
        let r1 = ThresholdSchedule::shipped().get(1).unwrap();
        assert!(select_pairs(&[pair(Task::Global, (0.5, 0.0), (0.0, 0.0))], &r1).is_empty());
        assert_eq!(select_pairs(&[pair(Task::Global, (0.5, 0.02), (0.0, 0.0))], &r1).len(), 1);
        let loc = Task::Local { start: 0.0, end: 4.0 };
        assert!(select_pairs(&[pair(loc, (0.4, 0.0), (0.0, 0.0))], &th).is_empty());
        assert_eq!(select_pairs(&[pair(loc, (0.5, 0.0), (0.0, 0.0))], &th).len(), 1);
    }

    fn arb_pairs() -> impl Strategy<Value = Vec<ScoredPair>> {
        let grid = || (0usize..12).prop_map(|k| k as f64 / 8.0);
        proptest::collection::vec((any::<bool>(), grid(), grid(), grid(), grid(), any::<bool>()), 0..40).prop_map(|v| {
            v.into_iter()
                .map(|(g, ea, ra, eb, rb, same)| {
                    let task = if g { Task::Global } else { Task::Local { start: 1.0, end: 3.0 } };
                    let mut p = pair(task, (ea, ra / 4.0), (eb, rb / 4.0));
                    if same {
                        p.b = p.a.clone();
                    }
                    p
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn selection_equals_brute_force(scored in arb_pairs(), row in 1usize..=7) {
            let th = ThresholdSchedule::shipped().get(row).unwrap();
            prop_assert_eq!(select_pairs(&scored, &th), brute(&scored, &th));
        }

        #[test]
        fn tightening_shrinks_selection(scored in arb_pairs(), extra in 0.0f64..0.5) {
            let th = ThresholdSchedule::shipped().get(2).unwrap();
            let tight = RoundThresholds { de_global: th.de_global + extra, de_local: th.de_local + extra, ..th };
            let loose = select_pairs(&scored, &th);
            let strict = select_pairs(&scored, &tight);
            prop_assert!(strict.len() <= loose.len());
            prop_assert!(strict.iter().all(|p| loose.contains(p)));
            prop_assert!(loose.iter().all(|p| p.chosen_verdict.total_rate < p.rejected_verdict.total_rate));
        }
    }

    #[test]
    fn round_dataset_is_deterministic() {
        let vocab = EventVocab::default();
        let tok = Tokenizer::new(&vocab, 30).unwrap();
        let cfg = ModelConfig {
            vocab_size: tok.len(),
            model_dim: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            ..ModelConfig::default()
        };
        let videos = gen_corpus(
            &CorpusConfig {
                n_videos: 6,
                seed: 2,
                ..CorpusConfig::default()
            },
            &vocab,
        )
        .unwrap();
        let corpus = PreparedCorpus::new(videos, &cfg, 0.1).unwrap();
        let model = ModelState::init(cfg, 1).unwrap();
        let judge = Judge::new(vocab, UnnaturalDetector::default());
        let open = RoundThresholds {
            de_global: 0.0,
            dr_global: -1.0,
            de_local: 0.0,
            dr_local: -1.0,
        };
        let pc = PairConfig {
            max_new_tokens: 12,
            ..PairConfig::default()
        };
        let a = build_round_dataset(&model, &tok, &judge, &corpus, 1, &open, &pc).unwrap();
        let b = build_round_dataset(&model, &tok, &judge, &corpus, 1, &open, &pc).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.stats, b.stats);
        assert_eq!((a.stats.global_pool, a.stats.local_pool), (6, 6));
        assert_eq!(a.pairs.len(), a.stats.global_selected + a.stats.local_selected);
        for p in &a.pairs {
            if let Some((s, e)) = p.task.interval() {
                let v = corpus.videos.iter().find(|v| v.id == p.video_id).unwrap();
                assert!(s >= 0.0 && e <= v.duration && s < e);
            }
            assert!(p.chosen_verdict.total_rate < p.rejected_verdict.total_rate);
        }
        let c = build_round_dataset(&model, &tok, &judge, &corpus, 2, &open, &pc).unwrap();
        assert_ne!(a.pairs, c.pairs);
    }

    #[test]
    fn greedy_pairs_are_degenerate() {
        let vocab = EventVocab::default();
        let tok = Tokenizer::new(&vocab, 30).unwrap();
        let cfg = ModelConfig {
            vocab_size: tok.len(),
            model_dim: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            ..ModelConfig::default()
        };
        let v = video();
        let media = v.media(&cfg, 0.1).unwrap();
        let model = ModelState::init(cfg, 3).unwrap();
        let s = model.sampler().unwrap();
        let (a, b) = sample_pair(&s, &tok, &media, &Task::Global, 0.0, (1, 2), 10).unwrap();
        assert_eq!(a, b);
        assert!(sample_pair(&s, &tok, &media, &Task::Global, 1.0, (4, 4), 10).is_err());
    }

    #[test]
    fn pair_jsonl_round_trip() {
        let p = select_pairs(
            &[
                pair(Task::Global, (0.5, 0.0), (0.0, 0.0)),
                pair(Task::Local { start: 1.0, end: 4.0 }, (0.0, 0.0), (0.9, 0.0)),
            ],
            &ThresholdSchedule::shipped().get(3).unwrap(),
        );
        assert_eq!(p.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        write_pairs_jsonl(&path, &p).unwrap();
        assert_eq!(read_pairs_jsonl(&path).unwrap(), p);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"interval\":[1.0,4.0]") && text.contains("\"verdicts\""));
    }
}
