use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avmodel::{mix_seed, GenerateOptions, MediaInput, ModelState, Sampler};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, CaptionRecord, CorpusReport, Task, TaskSummary};
use crate::par;
use crate::prefpipe::Judge;
use crate::synthcorpus::{count_prompt, task_prompt, PreparedCorpus, Tokenizer};

pub fn greedy_caption(
    sampler: &Sampler<'_>,
    tok: &Tokenizer,
    media: &MediaInput,
    task: &Task,
    max_new_tokens: usize,
) -> Result<String> {
    let opts = GenerateOptions {
        temperature: 0.0,
        seed: 0,
        max_new_tokens,
        eos: tok.eos(),
    };
    let ids = sampler.generate(media, &task_prompt(tok, task)?, &opts)?;
    Ok(tok.decode(&ids))
}

/// The fixed local interval used for video `i` at evaluation time.
pub fn eval_tasks(corpus: &PreparedCorpus, seed: u64) -> Vec<[Task; 2]> {
    corpus
        .videos
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
            let (start, end) = v.sample_interval(&mut rng);
            [Task::Global, Task::Local { start, end }]
        })
        .collect()
}

/// Greedy global and local captions for every video, judged and aggregated.
pub fn evaluate(
    model: &ModelState,
    tok: &Tokenizer,
    judge: &Judge,
    corpus: &PreparedCorpus,
    seed: u64,
    max_new_tokens: usize,
) -> Result<CorpusReport> {
    if corpus.is_empty() {
        return Err(Error::domain("empty evaluation corpus"));
    }
    let sampler = model.sampler()?;
    let tasks = eval_tasks(corpus, seed);
    let records = par::try_map(&tasks, |i, pair| {
        let video = &corpus.videos[i];
        pair.iter()
            .map(|task| {
                let caption = greedy_caption(&sampler, tok, &corpus.media[i], task, max_new_tokens)?;
                Ok(CaptionRecord {
                    video_id: video.id.clone(),
                    task: *task,
                    report: judge.judge(&caption, video, task)?,
                    caption,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(aggregate(records.into_iter().flatten().collect()))
}

/// Exact-match accuracy on both count questions of every video.
pub fn qa_accuracy(model: &ModelState, tok: &Tokenizer, corpus: &PreparedCorpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::domain("empty evaluation corpus"));
    }
    let sampler = model.sampler()?;
    let opts = GenerateOptions {
        temperature: 0.0,
        seed: 0,
        max_new_tokens: 3,
        eos: tok.eos(),
    };
    let hits = par::try_map(&corpus.videos, |i, video| {
        let mut n = 0usize;
        for audio in [true, false] {
            let ids = sampler.generate(&corpus.media[i], &count_prompt(tok, audio)?, &opts)?;
            n += usize::from(tok.decode(&ids) == video.count(audio).to_string());
        }
        Ok::<_, Error>(n)
    })?;
    Ok(hits.iter().sum::<usize>() as f64 / (2 * corpus.len()) as f64)
}

/// Headline numbers of one evaluation, small enough for per-round logs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSummary {
    pub global: TaskSummary,
    pub local: TaskSummary,
    pub unnatural_rate: f64,
}

impl From<&CorpusReport> for EvalSummary {
    fn from(r: &CorpusReport) -> Self {
        Self {
            global: r.global,
            local: r.local,
            unnatural_rate: r.unnatural_rate,
        }
    }
}
