//! Runs pretraining, alignment, SFT and a few preference rounds with the
//! default configuration and prints the held-out metrics after each stage.
//!
//! cargo run --release --example desk_run -- [rounds] [config.toml] [sft-checkpoint]
//!
//! An existing checkpoint skips the supervised stages; a missing one is written.

use std::time::Instant;

use avcap_core::trainer::StageLog;
use avcap_core::metrics::format_table;
use avcap_core::trainer::{Pipeline, PipelineConfig};

fn main() -> avcap_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let rounds: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let cfg = match args.get(2) {
        Some(path) => PipelineConfig::from_toml(&std::fs::read_to_string(path)?)?,
        None => PipelineConfig::default(),
    };
    let t = Instant::now();
    let p = Pipeline::new(cfg)?;
    let mut state = p.init_model()?;
    let show = |name: &str, state: &_, t: &Instant| -> avcap_core::Result<()> {
        let r = p.evaluate(state)?;
        println!("== {name} ({:.0}s) qa {:.3}\n{}", t.elapsed().as_secs_f64(), p.qa_accuracy(state)?, format_table(&r));
        for rec in r.records.iter().take(2) {
            println!("   {:?}: {}", rec.task, rec.caption);
        }
        Ok(())
    };
    let ckpt = args.get(3).map(std::path::PathBuf::from);
    match &ckpt {
        Some(path) if path.exists() => state = avcap_core::avmodel::ModelState::load(path)?,
        _ => {
            curve(&p.run_pretrain(&mut state, &p.cfg.pretrain.clone())?);
            show("pretrain", &state, &t)?;
            curve(&p.run_alignment(&mut state, &p.cfg.align.clone())?);
            show("align", &state, &t)?;
            curve(&p.run_sft(&mut state, &p.cfg.sft.clone())?);
            if let Some(path) = &ckpt {
                state.save(path)?;
            }
        }
    }
    show("sft", &state, &t)?;
    let out = p.run_mrdpo(&mut state, &p.cfg.mrdpo.clone(), rounds)?;
    for r in &out.rounds {
        println!(
            "round {}: pairs g{}/{} l{}/{} pref {:.3} -> {:.3} | global total {:.3} rep {:.3} | local total {:.3} | unnatural {:.3}",
            r.round,
            r.pairs.global_selected,
            r.pairs.global_pool,
            r.pairs.local_selected,
            r.pairs.local_pool,
            r.preference.first().copied().unwrap_or(f64::NAN),
            r.preference.iter().rev().take(20).sum::<f64>() / 20.0,
            r.eval.global.total_rate,
            r.eval.global.repetition_rate,
            r.eval.local.total_rate,
            r.eval.unnatural_rate
        );
    }
    show("mrdpo", &state, &t)?;
    Ok(())
}

fn curve(log: &StageLog) {
    let w = (log.losses.len() / 10).max(1);
    let pts: Vec<String> = log.losses.chunks(w).map(|c| format!("{:.3}", c.iter().sum::<f64>() / c.len() as f64)).collect();
    println!("{} loss: {}", log.stage, pts.join(" "));
}
