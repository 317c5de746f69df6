use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use avcap_core::avmodel::ModelState;
use avcap_core::metrics::{aggregate, format_table, CaptionRecord, Task};
use avcap_core::prefpipe::Judge;
use avcap_core::synthcorpus::{gen_corpus, read_jsonl, write_jsonl, CorpusConfig, EventVocab, SyntheticVideo};
use avcap_core::trainer::{Pipeline, PipelineConfig, RunDir, StageKind};
use avcap_core::{Error, Result};

#[derive(Parser)]
#[command(name = "avcap", version, about = "Synthetic audio-visual captioning: training, evaluation and judging")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus as JSON Lines.
    GenCorpus {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        duration_min: u32,
        #[arg(long, default_value_t = 20)]
        duration_max: u32,
        #[arg(long)]
        force: bool,
    },
    /// Run training stages and write checkpoints, logs and reports.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stages to run (comma separated); all by default.
        #[arg(long, value_delimiter = ',')]
        stage: Vec<String>,
        /// Checkpoint to start from instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Post-alignment checkpoint used by rebirth when alignment is not part of this run.
        #[arg(long)]
        aligned: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint, or a caption file, on a corpus.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "captions", conflicts_with = "captions")]
        checkpoint: Option<PathBuf>,
        /// Caption file (JSON Lines of video_id, task, caption) to score instead of a model.
        #[arg(long)]
        captions: Option<PathBuf>,
        /// Corpus to evaluate on; the configured held-out corpus by default.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Judge every caption of a caption file against a corpus.
    Judge {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Print the default configuration as TOML.
    PrintDefaults,
}

/// One line of a caption file.
#[derive(Debug, Serialize, Deserialize)]
struct CaptionLine {
    video_id: String,
    task: Task,
    caption: String,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => 3,
        Error::Invariant(_) | Error::NonFinite(_) => 4,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let cfg = PipelineConfig::from_toml(&text)?;
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn guard_out(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists (use --force to overwrite)",
            path.display()
        )));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn read_captions(path: &Path) -> Result<Vec<CaptionLine>> {
    let file = fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn judge_lines(cfg: &PipelineConfig, corpus: &[SyntheticVideo], lines: Vec<CaptionLine>) -> Result<Vec<CaptionRecord>> {
    let judge = Judge::new(EventVocab::default(), cfg.detector.clone());
    lines
        .into_iter()
        .map(|l| {
            let video = corpus
                .iter()
                .find(|v| v.id == l.video_id)
                .ok_or_else(|| Error::Data(format!("caption for unknown video {:?}", l.video_id)))?;
            Ok(CaptionRecord {
                report: judge.judge(&l.caption, video, &l.task)?,
                video_id: l.video_id,
                task: l.task,
                caption: l.caption,
            })
        })
        .collect()
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenCorpus {
            n,
            seed,
            out,
            duration_min,
            duration_max,
            force,
        } => {
            if n == 0 || duration_min == 0 || duration_min > duration_max {
                return Err(Error::Config("need --n > 0 and 0 < --duration-min <= --duration-max".into()));
            }
            guard_out(&out, force)?;
            let cfg = CorpusConfig {
                n_videos: n,
                seed,
                duration_range: (duration_min, duration_max),
                ..CorpusConfig::default()
            };
            let videos = gen_corpus(&cfg, &EventVocab::default())?;
            write_jsonl(&out, &videos)?;
            println!("wrote {} videos to {}", videos.len(), out.display());
        }
        Cmd::Train {
            config,
            stage,
            resume,
            aligned,
            out,
            force,
        } => {
            let cfg = load_config(config.as_deref())?;
            let stages = if stage.is_empty() {
                StageKind::ALL.to_vec()
            } else {
                stage.iter().map(|s| StageKind::parse(s.trim())).collect::<Result<Vec<_>>>()?
            };
            let start = resume.as_deref().map(ModelState::load).transpose()?;
            let aligned = aligned.as_deref().map(ModelState::load).transpose()?;
            let pipeline = Pipeline::new(cfg)?;
            let dir = RunDir::create(&out, force)?;
            let outcome = pipeline.run(&stages, start, aligned, Some(&dir))?;
            for (name, s) in &outcome.reports {
                println!(
                    "{name:<8} global total {:5.1}%  rep {:5.1}%  local total {:5.1}%  unnatural {:4.1}%  qa {:5.1}%",
                    100.0 * s.global.total_rate,
                    100.0 * s.global.repetition_rate,
                    100.0 * s.local.total_rate,
                    100.0 * s.unnatural_rate,
                    100.0 * outcome.qa[name]
                );
            }
            println!("run written to {}", out.display());
        }
        Cmd::Eval {
            config,
            checkpoint,
            captions,
            corpus,
            out,
            force,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(p) = &out {
                guard_out(p, force)?;
            }
            let report = match (checkpoint, captions) {
                (Some(ck), _) => {
                    cfg.eval_path = corpus;
                    let model = ModelState::load(&ck)?;
                    cfg.model = model.config.clone();
                    Pipeline::new(cfg)?.evaluate(&model)?
                }
                (None, Some(caps)) => {
                    let videos = match &corpus {
                        Some(p) => read_jsonl(p)?,
                        None => gen_corpus(&cfg.eval_corpus, &EventVocab::default())?,
                    };
                    aggregate(judge_lines(&cfg, &videos, read_captions(&caps)?)?)
                }
                (None, None) => return Err(Error::Config("give --checkpoint or --captions".into())),
            };
            print!("{}", format_table(&report));
            if let Some(p) = out {
                fs::write(&p, serde_json::to_string_pretty(&report)?)?;
            }
        }
        Cmd::Judge {
            config,
            corpus,
            captions,
            out,
            force,
        } => {
            let cfg = load_config(config.as_deref())?;
            guard_out(&out, force)?;
            let videos = read_jsonl(&corpus)?;
            let records = judge_lines(&cfg, &videos, read_captions(&captions)?)?;
            let mut text = String::new();
            for r in &records {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            fs::write(&out, text)?;
            println!("judged {} captions into {}", records.len(), out.display());
        }
        Cmd::PrintDefaults => print!("{}", PipelineConfig::default().to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
