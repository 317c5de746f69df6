//! Supervised example builders for each stage.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::avmodel::{mix_seed, MediaInput};
use crate::error::Result;
use crate::losses::Sequence;
use crate::metrics::Task;
use crate::synthcorpus::{
    caption_target, count_prompt, render_caption, task_prompt, PreparedCorpus, SyntheticVideo, Tokenizer,
};

/// Local intervals drawn per video for supervised stages.
pub const LOCALS: usize = 1;

/// Which parts of a video an example sees and describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Visual,
    Audio,
    Both,
}

fn caption_for(video: &SyntheticVideo, view: View, task: &Task) -> Result<String> {
    let events = match view {
        View::Visual => &video.visual_events[..],
        View::Audio => &video.audio_events[..],
        View::Both => return Ok(match task.interval() {
            None => video.caption.clone(),
            Some((a, b)) => video.local_caption(a, b)?,
        }),
    };
    let kept: Vec<_> = match task.interval() {
        None => events.to_vec(),
        Some((a, b)) => events.iter().filter(|e| e.t >= a && e.t <= b).cloned().collect(),
    };
    Ok(render_caption(&kept))
}

/// A global task and `locals` local tasks for every video, with intervals drawn from `seed`.
pub fn video_tasks(corpus: &PreparedCorpus, locals: usize, seed: u64) -> Vec<Vec<Task>> {
    corpus
        .videos
        .iter()
        .enumerate()
        .map(|(i, video)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
            let mut tasks = vec![Task::Global];
            for _ in 0..locals {
                let (start, end) = video.sample_interval(&mut rng);
                tasks.push(Task::Local { start, end });
            }
            tasks
        })
        .collect()
}

/// One global and `locals` local caption examples plus, optionally, count
/// questions, for one view of every video. Local intervals come from `seed`.
pub fn caption_examples(
    corpus: &PreparedCorpus,
    tok: &Tokenizer,
    view: View,
    locals: usize,
    with_counts: bool,
    seed: u64,
) -> Result<Vec<Sequence>> {
    let mut out = Vec::new();
    let all_tasks = video_tasks(corpus, locals, seed);
    for ((i, video), tasks) in corpus.videos.iter().enumerate().zip(all_tasks) {
        let media = match view {
            View::Both => corpus.media[i].clone(),
            View::Visual => Arc::new(corpus.media[i].visual_only()),
            View::Audio => Arc::new(corpus.media[i].audio_only()),
        };
        for task in tasks {
            out.push(Sequence {
                media: media.clone(),
                prompt: task_prompt(tok, &task)?,
                target: caption_target(tok, &caption_for(video, view, &task)?)?,
            });
        }
        if with_counts {
            let kinds: &[bool] = match view {
                View::Visual => &[false],
                View::Audio => &[true],
                View::Both => &[true, false],
            };
            for &audio in kinds {
                out.push(count_example(tok, video, media.clone(), audio)?);
            }
        }
    }
    Ok(out)
}

pub fn count_example(tok: &Tokenizer, video: &SyntheticVideo, media: Arc<MediaInput>, audio: bool) -> Result<Sequence> {
    Ok(Sequence {
        media,
        prompt: count_prompt(tok, audio)?,
        target: vec![tok.number(video.count(audio))?, tok.eos()],
    })
}

/// Both count questions for every video, answered from ground truth.
pub fn count_examples(corpus: &PreparedCorpus, tok: &Tokenizer) -> Result<Vec<Sequence>> {
    let mut out = Vec::new();
    for (video, media) in corpus.videos.iter().zip(&corpus.media) {
        for audio in [true, false] {
            out.push(count_example(tok, video, media.clone(), audio)?);
        }
    }
    Ok(out)
}

/// Every view of every video: visual captions on visual-only input, audio
/// captions on audio-only input and full captions on interleaved input.
pub fn pretrain_examples(corpus: &PreparedCorpus, tok: &Tokenizer, seed: u64) -> Result<Vec<Sequence>> {
    let mut out = caption_examples(corpus, tok, View::Visual, LOCALS, true, seed)?;
    out.extend(caption_examples(corpus, tok, View::Audio, LOCALS, true, mix_seed(seed, 1))?);
    out.extend(caption_examples(corpus, tok, View::Both, LOCALS, true, mix_seed(seed, 2))?);
    Ok(out)
}

pub fn alignment_examples(corpus: &PreparedCorpus, tok: &Tokenizer, seed: u64) -> Result<Vec<Sequence>> {
    caption_examples(corpus, tok, View::Audio, LOCALS, false, seed)
}

pub fn sft_examples(corpus: &PreparedCorpus, tok: &Tokenizer, seed: u64) -> Result<Vec<Sequence>> {
    caption_examples(corpus, tok, View::Both, LOCALS, true, seed)
}

/// Ground-truth captions used by the likelihood term of guided DPO.
pub fn gt_examples(corpus: &PreparedCorpus, tok: &Tokenizer, seed: u64) -> Result<Vec<Sequence>> {
    caption_examples(corpus, tok, View::Both, 1, false, seed)
}
