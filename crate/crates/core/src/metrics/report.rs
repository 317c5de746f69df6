use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Task;

/// Scores of one caption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub repetition_rate: f64,
    pub miss_rate: f64,
    pub hall_rate: f64,
    pub total_rate: f64,
    pub unnatural: bool,
}

impl EvalReport {
    pub fn new(repetition_rate: f64, miss_rate: f64, hall_rate: f64, unnatural: bool) -> Self {
        Self {
            repetition_rate,
            miss_rate,
            hall_rate,
            total_rate: miss_rate + hall_rate,
            unnatural,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub video_id: String,
    pub task: Task,
    pub caption: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// Mean rates over the captions of one task kind.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskSummary {
    pub count: usize,
    pub repetition_rate: f64,
    pub miss_rate: f64,
    pub hall_rate: f64,
    pub total_rate: f64,
    pub unnatural_rate: f64,
}

impl TaskSummary {
    fn of<'a>(reports: impl Iterator<Item = &'a EvalReport>) -> Self {
        let mut s = Self::default();
        let mut unnatural = 0usize;
        for r in reports {
            s.count += 1;
            s.repetition_rate += r.repetition_rate;
            s.miss_rate += r.miss_rate;
            s.hall_rate += r.hall_rate;
            unnatural += usize::from(r.unnatural);
        }
        if s.count > 0 {
            let n = s.count as f64;
            s.repetition_rate /= n;
            s.miss_rate /= n;
            s.hall_rate /= n;
            s.unnatural_rate = unnatural as f64 / n;
        }
        s.total_rate = s.miss_rate + s.hall_rate;
        s
    }
}

/// Per-caption records with global and local aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub global: TaskSummary,
    pub local: TaskSummary,
    /// Unnatural fraction over every record.
    pub unnatural_rate: f64,
    pub records: Vec<CaptionRecord>,
}

pub fn aggregate(records: Vec<CaptionRecord>) -> CorpusReport {
    let global = TaskSummary::of(records.iter().filter(|r| r.task.is_global()).map(|r| &r.report));
    let local = TaskSummary::of(records.iter().filter(|r| !r.task.is_global()).map(|r| &r.report));
    let unnatural_rate = TaskSummary::of(records.iter().map(|r| &r.report)).unnatural_rate;
    CorpusReport {
        global,
        local,
        unnatural_rate,
        records,
    }
}

/// Plain-text summary in percent, one row per task kind.
pub fn format_table(report: &CorpusReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<8}{:>8}{:>8}{:>8}{:>8}{:>8}", "task", "n", "Rep", "Miss", "Hall", "Total");
    for (name, s) in [("global", &report.global), ("local", &report.local)] {
        if s.count == 0 {
            continue;
        }
        let _ = writeln!(
            out,
            "{:<8}{:>8}{:>8.1}{:>8.1}{:>8.1}{:>8.1}",
            name,
            s.count,
            100.0 * s.repetition_rate,
            100.0 * s.miss_rate,
            100.0 * s.hall_rate,
            100.0 * s.total_rate
        );
    }
    let _ = writeln!(out, "unnatural {:.1}%", 100.0 * report.unnatural_rate);
    out
}
