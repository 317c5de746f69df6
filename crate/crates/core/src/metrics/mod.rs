//! Caption quality measures: phrase repetition, atomic-event miss and
//! hallucination rates, local-interval event filtering and the
//! unnatural-pattern rate.

mod report;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use report::{aggregate, format_table, CaptionRecord, CorpusReport, EvalReport, TaskSummary};

/// Characters that end a phrase.
pub const PHRASE_DELIMITERS: [char; 7] = ['.', ',', ';', ':', '!', '?', '\n'];

/// Whole-video caption or a caption of one time interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Task {
    Global,
    Local { start: f64, end: f64 },
}

impl Task {
    pub fn is_global(&self) -> bool {
        matches!(self, Task::Global)
    }

    pub fn interval(&self) -> Option<(f64, f64)> {
        match *self {
            Task::Global => None,
            Task::Local { start, end } => Some((start, end)),
        }
    }
}

/// One atomic event of a video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicEvent {
    pub id: String,
    pub phrase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<f64>,
}

/// Lowercased, trimmed phrases between delimiters; empty phrases dropped.
pub fn split_phrases(text: &str) -> Vec<String> {
    text.split(|c| PHRASE_DELIMITERS.contains(&c))
        .map(|p| p.trim().to_lowercase())
        .filter(|p| !p.is_empty())
        .collect()
}

/// Fraction of the text's words that belong to repeated phrase occurrences.
///
/// Only occurrences after a phrase's first count as repeats, so a text with
/// no duplicates scores 0 and `k` copies of one sentence score `(k-1)/k`.
pub fn repetition_rate(text: &str) -> f64 {
    let total = text.split_whitespace().count();
    if total == 0 {
        return 0.0;
    }
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut repeated = 0;
    for p in split_phrases(text) {
        let words = p.split_whitespace().count();
        let n = seen.entry(p).or_insert(0);
        if *n > 0 {
            repeated += words;
        }
        *n += 1;
    }
    (repeated as f64 / total as f64).min(1.0)
}

/// `(miss, hall)` for a caption's event set against the ground truth.
/// Both rates are normalised by the ground-truth count, so `hall` may exceed 1.
pub fn miss_hall<T: Ord>(caption: &BTreeSet<T>, gt: &BTreeSet<T>) -> Result<(f64, f64)> {
    if gt.is_empty() {
        return Err(Error::domain("ground truth has no events"));
    }
    let n = gt.len() as f64;
    let missed = gt.difference(caption).count() as f64;
    let invented = caption.difference(gt).count() as f64;
    Ok((missed / n, invented / n))
}

/// Events whose `[start, end]` overlaps `[t0, t1]`; touching endpoints count.
pub fn filter_local_events(events: &[AtomicEvent], t0: f64, t1: f64) -> Result<Vec<AtomicEvent>> {
    if !(t0 < t1) {
        return Err(Error::domain(format!("empty interval [{t0}, {t1}]")));
    }
    let mut out = Vec::new();
    for e in events {
        let (Some(s), Some(en)) = (e.start, e.end) else {
            return Err(Error::contract(format!("event {} has no timestamps", e.id)));
        };
        if s <= t1 && en >= t0 {
            out.push(e.clone());
        }
    }
    Ok(out)
}

/// Flags captions with degenerate markers or extreme repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnnaturalDetector {
    /// Literal markers, matched case-insensitively.
    pub patterns: Vec<String>,
    /// Repetition rate strictly above this flags a caption.
    pub repetition_threshold: f64,
}

impl Default for UnnaturalDetector {
    fn default() -> Self {
        Self {
            patterns: vec!["#video description".into(), "#audio:".into(), "#".into()],
            repetition_threshold: 0.5,
        }
    }
}

impl UnnaturalDetector {
    pub fn new(patterns: Vec<String>, repetition_threshold: f64) -> Result<Self> {
        if patterns.is_empty() || patterns.iter().any(String::is_empty) {
            return Err(Error::domain("unnatural pattern list must be non-empty"));
        }
        Ok(Self {
            patterns,
            repetition_threshold,
        })
    }

    pub fn has_pattern(&self, caption: &str) -> bool {
        let lower = caption.to_lowercase();
        self.patterns.iter().any(|p| lower.contains(&p.to_lowercase()))
    }

    pub fn is_unnatural(&self, caption: &str) -> bool {
        self.has_pattern(caption) || repetition_rate(caption) > self.repetition_threshold
    }

    /// Fraction of `captions` flagged; 0 for an empty list.
    pub fn rate<S: AsRef<str>>(&self, captions: &[S]) -> f64 {
        if captions.is_empty() {
            return 0.0;
        }
        let n = captions.iter().filter(|c| self.is_unnatural(c.as_ref())).count();
        n as f64 / captions.len() as f64
    }
}

/// Median of `k` draws of a stochastic score (the upper median for even `k`).
pub fn median_of<F: FnMut() -> f64>(k: usize, mut draw: F) -> Result<f64> {
    if k == 0 {
        return Err(Error::domain("median of zero draws"));
    }
    let mut xs: Vec<f64> = (0..k).map(|_| draw()).collect();
    xs.sort_by(f64::total_cmp);
    Ok(xs[k / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn ev(id: &str, s: f64, e: f64) -> AtomicEvent {
        AtomicEvent {
            id: id.into(),
            phrase: id.into(),
            start: Some(s),
            end: Some(e),
        }
    }

    #[test]
    fn phrase_splitting() {
        assert_eq!(split_phrases("A man walks. A dog barks."), vec!["a man walks", "a dog barks"]);
        assert!(split_phrases("").is_empty());
        assert_eq!(split_phrases("Hello,, world!"), vec!["hello", "world"]);
        assert_eq!(split_phrases("one;two:three\nfour?"), vec!["one", "two", "three", "four"]);
    }

    #[test]
    fn repetition_examples() {
        assert_eq!(repetition_rate("a b c. d e f."), 0.0);
        assert!((repetition_rate("a b c. a b c. d e f.") - 1.0 / 3.0).abs() < 1e-15);
        assert!((repetition_rate("x. x. x.") - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(repetition_rate("x. x. x. x."), 0.75);
        assert_eq!(repetition_rate(""), 0.0);
        assert_eq!(repetition_rate("   "), 0.0);
    }

    #[test]
    fn miss_hall_examples() {
        assert_eq!(miss_hall(&ids(&["A", "B", "C"]), &ids(&["A", "B", "C"])).unwrap(), (0.0, 0.0));
        let (m, h) = miss_hall(&ids(&["A", "B", "D"]), &ids(&["A", "B", "C"])).unwrap();
        assert!((m - 1.0 / 3.0).abs() < 1e-15 && (h - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(miss_hall(&ids(&[]), &ids(&["A", "B"])).unwrap(), (1.0, 0.0));
        assert_eq!(miss_hall(&ids(&["A", "X", "Y", "Z"]), &ids(&["A"])).unwrap(), (0.0, 3.0));
        assert!(matches!(miss_hall(&ids(&["A"]), &ids(&[])), Err(Error::Domain(_))));
    }

    #[test]
    fn local_filter_examples() {
        let events = vec![ev("a", 2.0, 4.0), ev("b", 0.0, 1.0), ev("c", 1.0, 2.0)];
        let ids = |v: Vec<AtomicEvent>| v.into_iter().map(|e| e.id).collect::<Vec<_>>();
        assert_eq!(ids(filter_local_events(&events[..1], 0.0, 10.0).unwrap()), vec!["a"]);
        assert!(filter_local_events(&events[1..2], 2.0, 3.0).unwrap().is_empty());
        assert_eq!(ids(filter_local_events(&events[2..], 2.0, 3.0).unwrap()), vec!["c"]);
        assert_eq!(filter_local_events(&events, 0.0, f64::INFINITY).unwrap().len(), 3);
        let untimed = vec![AtomicEvent {
            id: "u".into(),
            phrase: "u".into(),
            start: None,
            end: None,
        }];
        assert!(matches!(filter_local_events(&untimed, 0.0, 1.0), Err(Error::Contract(_))));
        assert!(filter_local_events(&events, 3.0, 3.0).is_err());
    }

    #[test]
    fn unnatural_examples() {
        let det = UnnaturalDetector::new(vec!["#Audio:".into()], 0.5).unwrap();
        assert_eq!(det.rate(&["a dog barks.", "a bell rings. a car passes."]), 0.0);
        let mut caps = vec!["a dog barks.".to_string(); 22];
        caps.extend(std::iter::repeat_n("#audio: a bell rings.".to_string(), 3));
        assert!((det.rate(&caps) - 0.12).abs() < 1e-15);
        assert!(det.is_unnatural("x. x. x. x."));
        assert!(!det.is_unnatural("x. x."));
        assert!(UnnaturalDetector::new(vec![], 0.5).is_err());
    }

    #[test]
    fn median_wrapper() {
        let mut vals = [5.0, 1.0, 4.0, 2.0, 3.0, 9.0, 0.0].into_iter();
        assert_eq!(median_of(7, || vals.next().unwrap()).unwrap(), 3.0);
        assert!(median_of(0, || 0.0).is_err());
    }

    proptest! {
        #[test]
        fn repetition_case_and_punct_invariant(
            words in proptest::collection::vec("[a-c]{1,3}", 1..12),
            puncts in proptest::collection::vec(0usize..6, 12),
            upper in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let base: String = words.iter().map(|w| format!("{w}. ")).collect();
            let alt: String = words
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let w = if upper[i] { w.to_uppercase() } else { w.clone() };
                    format!("{w}{} ", PHRASE_DELIMITERS[puncts[i]])
                })
                .collect();
            let r = repetition_rate(&base);
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert_eq!(r, repetition_rate(&alt));
        }

        #[test]
        fn miss_hall_is_permutation_invariant(
            cap in proptest::collection::btree_set(0u8..20, 0..10),
            gt in proptest::collection::btree_set(0u8..20, 1..10),
            shift in 1u8..50,
        ) {
            let (m, h) = miss_hall(&cap, &gt).unwrap();
            let relabel = |s: &BTreeSet<u8>| s.iter().map(|x| x.wrapping_add(shift).wrapping_mul(3)).collect::<BTreeSet<u8>>();
            let (m2, h2) = miss_hall(&relabel(&cap), &relabel(&gt)).unwrap();
            prop_assert_eq!((m, h), (m2, h2));
            prop_assert!((0.0..=1.0).contains(&m) && h >= 0.0);
        }
    }
}
