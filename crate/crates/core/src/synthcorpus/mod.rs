//! Synthetic captioning domain: videos made of timed visual and audio events
//! whose ground truth is known by construction.

mod vocab;

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::avmodel::{audio_segment_count, sample_frames, AudioSegments, FrameFeatures, MediaInput, ModelConfig};
use crate::error::{Error, Result};
use crate::metrics::{filter_local_events, split_phrases, AtomicEvent, Task};
use crate::numcore::Tensor;
use crate::par;

pub use vocab::{EventVocab, Tokenizer, COUNT, DESCRIBE, EOS, MARKERS, SIGHTS, SOUNDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub id: String,
    pub phrase: String,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub id: String,
    pub duration: f64,
    pub visual_events: Vec<TimedEvent>,
    pub audio_events: Vec<TimedEvent>,
    pub caption: String,
    pub atomic_events: Vec<AtomicEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_videos: usize,
    pub seed: u64,
    /// Inclusive range of whole-second durations.
    pub duration_range: (u32, u32),
    /// Inclusive range of events per video.
    pub events_range: (usize, usize),
    /// Probability that an event is carried by the audio track.
    pub audio_fraction: f64,
    /// Standard deviation of the feature noise.
    pub noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_videos: 100,
            seed: 0,
            duration_range: (10, 20),
            events_range: (4, 10),
            audio_fraction: 0.5,
            noise: 0.1,
        }
    }
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn gaussian_row(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Fixed feature direction of an event in a feature space of width `dim`.
pub fn event_feature(id: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv(id) ^ dim as u64);
    gaussian_row(&mut rng, dim, 1.0)
}

/// One sentence per event in chronological order.
pub fn render_caption(events: &[TimedEvent]) -> String {
    let mut sorted: Vec<&TimedEvent> = events.iter().collect();
    sorted.sort_by(|a, b| a.t.total_cmp(&b.t).then_with(|| a.id.cmp(&b.id)));
    sorted.iter().map(|e| format!("{}.", e.phrase)).collect::<Vec<_>>().join(" ")
}

/// Event ids mentioned by `text` and the number of phrases that match no event.
pub fn parse_caption(text: &str, vocab: &EventVocab) -> (BTreeSet<String>, usize) {
    let (ids, malformed) = parse_detailed(text, vocab);
    (ids, malformed.len())
}

/// Like [`parse_caption`] but returns the distinct malformed phrases.
pub fn parse_detailed(text: &str, vocab: &EventVocab) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut ids = BTreeSet::new();
    let mut malformed = BTreeSet::new();
    for p in split_phrases(text) {
        match vocab.id_of(&p) {
            Some(id) => {
                ids.insert(id.to_string());
            }
            None => {
                malformed.insert(p);
            }
        }
    }
    (ids, malformed)
}

/// Judge-side event set of a caption: matched ids plus one invented event
/// per distinct malformed phrase.
pub fn caption_event_set(text: &str, vocab: &EventVocab) -> BTreeSet<String> {
    let (mut ids, malformed) = parse_detailed(text, vocab);
    ids.extend(malformed.into_iter().map(|p| format!("?{p}")));
    ids
}

impl SyntheticVideo {
    pub fn new(id: String, duration: f64, visual_events: Vec<TimedEvent>, audio_events: Vec<TimedEvent>) -> Result<Self> {
        let mut all: Vec<TimedEvent> = visual_events.iter().chain(&audio_events).cloned().collect();
        all.sort_by(|a, b| a.t.total_cmp(&b.t).then_with(|| a.id.cmp(&b.id)));
        let caption = render_caption(&all);
        let atomic_events = all
            .iter()
            .map(|e| AtomicEvent {
                id: e.id.clone(),
                phrase: e.phrase.clone(),
                start: Some(e.t),
                end: Some(e.t),
            })
            .collect();
        let v = Self {
            id,
            duration,
            visual_events,
            audio_events,
            caption,
            atomic_events,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::data(format!("video {}: bad duration {}", self.id, self.duration)));
        }
        let mut seen = BTreeSet::new();
        for e in self.visual_events.iter().chain(&self.audio_events) {
            if !(0.0..=self.duration).contains(&e.t) {
                return Err(Error::data(format!("video {}: event {} at {} outside [0, {}]", self.id, e.id, e.t, self.duration)));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::data(format!("video {}: duplicate event {}", self.id, e.id)));
            }
        }
        Ok(())
    }

    pub fn event_ids(&self) -> BTreeSet<String> {
        self.atomic_events.iter().map(|e| e.id.clone()).collect()
    }

    /// Ids of events inside `[t0, t1]`.
    pub fn local_event_ids(&self, t0: f64, t1: f64) -> Result<BTreeSet<String>> {
        Ok(filter_local_events(&self.atomic_events, t0, t1)?.into_iter().map(|e| e.id).collect())
    }

    /// Ground-truth caption restricted to `[t0, t1]`.
    pub fn local_caption(&self, t0: f64, t1: f64) -> Result<String> {
        let keep = self.local_event_ids(t0, t1)?;
        let events: Vec<TimedEvent> = self
            .visual_events
            .iter()
            .chain(&self.audio_events)
            .filter(|e| keep.contains(&e.id))
            .cloned()
            .collect();
        Ok(render_caption(&events))
    }

    /// Number of audio (`true`) or visual events.
    pub fn count(&self, audio: bool) -> usize {
        if audio {
            self.audio_events.len()
        } else {
            self.visual_events.len()
        }
    }

    /// Caption of the visual events alone.
    pub fn visual_caption(&self) -> String {
        render_caption(&self.visual_events)
    }

    /// Caption of the audio events alone.
    pub fn audio_caption(&self) -> String {
        render_caption(&self.audio_events)
    }

    /// Random whole-second interval covering 20% to 60% of the video that
    /// contains at least one event when the video has any.
    pub fn sample_interval<R: Rng>(&self, rng: &mut R) -> (f64, f64) {
        let t = self.duration.floor().max(1.0) as usize;
        let lo = ((0.2 * t as f64).ceil() as usize).max(1);
        let hi = ((0.6 * t as f64).floor() as usize).max(lo);
        let mut last = (0.0, t as f64);
        for _ in 0..64 {
            let len = rng.random_range(lo..=hi);
            let start = rng.random_range(0..=t - len.min(t));
            last = (start as f64, (start + len).min(t) as f64);
            if self.atomic_events.is_empty() || self.atomic_events.iter().any(|e| e.start.is_some_and(|s| s >= last.0 && s <= last.1)) {
                return last;
            }
        }
        last
    }

    /// Encoder-side features for this video under `cfg`.
    pub fn media(&self, cfg: &ModelConfig, noise: f64) -> Result<MediaInput> {
        let times = sample_frames(self.duration, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(fnv(&self.id));
        let dv = cfg.visual_input_dim;
        let mut frames: Vec<f64> = (0..times.len()).flat_map(|_| gaussian_row(&mut rng, dv, noise)).collect();
        for e in &self.visual_events {
            let k = nearest(&times, e.t);
            let f = event_feature(&e.id, dv);
            frames[k * dv..(k + 1) * dv].iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
        let frames = FrameFeatures::new(Tensor::matrix(times.len(), dv, frames)?, times)?;

        let tps = cfg.audio_tokens_per_segment;
        let segs = audio_segment_count(self.duration, cfg);
        let da = cfg.audio_input_dim;
        let step = cfg.audio_segment_len / tps as f64;
        let centers: Vec<f64> = (0..segs * tps).map(|j| (j as f64 + 0.5) * step).collect();
        let mut audio: Vec<f64> = (0..centers.len()).flat_map(|_| gaussian_row(&mut rng, da, noise)).collect();
        for e in &self.audio_events {
            let k = nearest(&centers, e.t);
            let f = event_feature(&e.id, da);
            audio[k * da..(k + 1) * da].iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
        let segments = audio
            .chunks(tps * da)
            .map(|c| Tensor::matrix(tps, da, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(MediaInput {
            frames: Some(frames),
            audio: Some(AudioSegments { segments }),
        })
    }
}

fn nearest(times: &[f64], t: f64) -> usize {
    let mut best = 0;
    for (i, &x) in times.iter().enumerate() {
        if (x - t).abs() < (times[best] - t).abs() {
            best = i;
        }
    }
    best
}

fn gen_video(cfg: &CorpusConfig, vocab: &EventVocab, index: usize) -> Result<SyntheticVideo> {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::avmodel::mix_seed(cfg.seed, index as u64));
    let duration = rng.random_range(cfg.duration_range.0..=cfg.duration_range.1);
    let slots = duration as usize;
    let n = rng.random_range(cfg.events_range.0..=cfg.events_range.1).min(slots);
    let mut times: Vec<usize> = sample(&mut rng, slots, n).into_vec();
    times.sort_unstable();
    let mut is_audio: Vec<bool> = times.iter().map(|_| rng.random_bool(cfg.audio_fraction)).collect();
    let (na, nv) = (vocab.audio().len(), vocab.visual().len());
    if n > na + nv {
        return Err(Error::domain("vocabulary too small for the requested events per video"));
    }
    let mut n_audio = is_audio.iter().filter(|a| **a).count();
    for a in is_audio.iter_mut() {
        if *a && n_audio > na {
            *a = false;
            n_audio -= 1;
        } else if !*a && n - n_audio > nv {
            *a = true;
            n_audio += 1;
        }
    }
    let n_visual = n - n_audio;
    let vis_pick = sample(&mut rng, vocab.visual().len(), n_visual).into_vec();
    let aud_pick = sample(&mut rng, vocab.audio().len(), n_audio).into_vec();
    let (mut vi, mut ai) = (0, 0);
    let mut visual_events = Vec::new();
    let mut audio_events = Vec::new();
    for (&slot, &a) in times.iter().zip(&is_audio) {
        let t = slot as f64 + 0.5;
        if a {
            let p = &vocab.audio()[aud_pick[ai]];
            ai += 1;
            audio_events.push(TimedEvent {
                id: vocab.id_of(p).unwrap_or_default().to_string(),
                phrase: p.clone(),
                t,
            });
        } else {
            let p = &vocab.visual()[vis_pick[vi]];
            vi += 1;
            visual_events.push(TimedEvent {
                id: vocab.id_of(p).unwrap_or_default().to_string(),
                phrase: p.clone(),
                t,
            });
        }
    }
    SyntheticVideo::new(format!("s{}-{index:05}", cfg.seed), duration as f64, visual_events, audio_events)
}

/// Generates `cfg.n_videos` videos; a pure function of `cfg` and `vocab`.
pub fn gen_corpus(cfg: &CorpusConfig, vocab: &EventVocab) -> Result<Vec<SyntheticVideo>> {
    if cfg.n_videos == 0 {
        return Err(Error::domain("corpus must contain at least one video"));
    }
    if vocab.visual().is_empty() && vocab.audio().is_empty() {
        return Err(Error::domain("event vocabulary is empty"));
    }
    let (d0, d1) = cfg.duration_range;
    let (e0, e1) = cfg.events_range;
    if d0 == 0 || d0 > d1 || e0 == 0 || e0 > e1 {
        return Err(Error::domain(format!("bad ranges: durations {d0}..={d1}, events {e0}..={e1}")));
    }
    if !(0.0..=1.0).contains(&cfg.audio_fraction) {
        return Err(Error::domain("audio fraction must lie in [0, 1]"));
    }
    let idx: Vec<usize> = (0..cfg.n_videos).collect();
    par::try_map(&idx, |_, &i| gen_video(cfg, vocab, i))
}

/// Prompt tokens for a captioning task. Local intervals must have whole-second
/// endpoints within the tokenizer's number range.
pub fn task_prompt(tok: &Tokenizer, task: &Task) -> Result<Vec<usize>> {
    let describe = tok.id(DESCRIBE)?;
    match *task {
        Task::Global => Ok(vec![describe]),
        Task::Local { start, end } => {
            if start.fract() != 0.0 || end.fract() != 0.0 || start < 0.0 {
                return Err(Error::domain(format!("interval [{start}, {end}] is not in whole seconds")));
            }
            Ok(vec![describe, tok.number(start as usize)?, tok.number(end as usize)?])
        }
    }
}

/// Prompt asking how many audio (`true`) or visual events the video has.
pub fn count_prompt(tok: &Tokenizer, audio: bool) -> Result<Vec<usize>> {
    Ok(vec![tok.id(COUNT)?, tok.id(if audio { SOUNDS } else { SIGHTS })?])
}

/// Caption tokens followed by the end token.
pub fn caption_target(tok: &Tokenizer, text: &str) -> Result<Vec<usize>> {
    let mut ids = tok.encode(text)?;
    ids.push(tok.eos());
    Ok(ids)
}

/// Videos together with their encoder-side features, computed once.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub videos: Vec<SyntheticVideo>,
    pub media: Vec<Arc<MediaInput>>,
}

impl PreparedCorpus {
    pub fn new(videos: Vec<SyntheticVideo>, cfg: &ModelConfig, noise: f64) -> Result<Self> {
        let media = par::try_map(&videos, |_, v| v.media(cfg, noise).map(Arc::new))?;
        Ok(Self { videos, media })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

pub fn write_jsonl(path: &Path, videos: &[SyntheticVideo]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in videos {
        serde_json::to_writer(&mut w, v)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SyntheticVideo>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: SyntheticVideo = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        v.validate()?;
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::data(format!("{} holds no videos", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
