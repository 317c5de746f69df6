use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{split_phrases, PHRASE_DELIMITERS};

const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "white", "black"];
const SHAPES: [&str; 4] = ["square", "circle", "star", "arrow"];
const LEVELS: [&str; 4] = ["loud", "soft", "short", "long"];
const SOURCES: [&str; 6] = ["bell", "drum", "horn", "whistle", "chime", "beep"];

/// Event phrases of the synthetic domain, split by the modality that carries them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventVocab {
    visual: Vec<String>,
    audio: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, String>,
}

impl Default for EventVocab {
    fn default() -> Self {
        let compose = |a: &[&str], b: &[&str]| -> Vec<String> {
            a.iter().flat_map(|x| b.iter().map(move |y| format!("{x} {y}"))).collect()
        };
        Self::new(compose(&COLORS, &SHAPES), compose(&LEVELS, &SOURCES)).expect("built-in vocabulary is valid")
    }
}

impl EventVocab {
    pub fn new(visual: Vec<String>, audio: Vec<String>) -> Result<Self> {
        if visual.is_empty() && audio.is_empty() {
            return Err(Error::domain("event vocabulary is empty"));
        }
        let mut v = Self {
            visual,
            audio,
            index: BTreeMap::new(),
        };
        v.rebuild_index()?;
        Ok(v)
    }

    /// Restores the phrase index after deserialization.
    pub fn rebuild_index(&mut self) -> Result<()> {
        self.index.clear();
        let all = self
            .visual
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("v{i:02}"), p))
            .chain(self.audio.iter().enumerate().map(|(i, p)| (format!("a{i:02}"), p)));
        for (id, p) in all {
            if split_phrases(p) != [p.clone()] || p.split_whitespace().collect::<Vec<_>>().join(" ") != *p {
                return Err(Error::domain(format!("phrase {p:?} is not a single normalised phrase")));
            }
            if self.index.insert(p.clone(), id).is_some() {
                return Err(Error::domain(format!("phrase {p:?} appears twice")));
            }
        }
        Ok(())
    }

    pub fn visual(&self) -> &[String] {
        &self.visual
    }

    pub fn audio(&self) -> &[String] {
        &self.audio
    }

    pub fn id_of(&self, phrase: &str) -> Option<&str> {
        self.index.get(phrase).map(String::as_str)
    }

    pub fn phrase_of(&self, id: &str) -> Option<&str> {
        let (kind, idx) = id.split_at_checked(1)?;
        let i: usize = idx.parse().ok()?;
        match kind {
            "v" => self.visual.get(i),
            "a" => self.audio.get(i),
            _ => None,
        }
        .map(String::as_str)
    }

    pub fn words(&self) -> BTreeSet<&str> {
        self.index.keys().flat_map(|p| p.split_whitespace()).collect()
    }
}

/// Control words shared by prompts, answers and degenerate markers.
pub const EOS: &str = "<eos>";
pub const DESCRIBE: &str = "describe";
pub const COUNT: &str = "count";
pub const SOUNDS: &str = "sounds";
pub const SIGHTS: &str = "sights";
pub const MARKERS: [&str; 3] = ["#video", "description", "#audio:"];

/// Word-level tokenizer over the event words, control words and the
/// integers `0..=max_number`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Tokenizer {
    pub fn new(vocab: &EventVocab, max_number: usize) -> Result<Self> {
        let mut tokens: Vec<String> = [EOS, ".", DESCRIBE, COUNT, SOUNDS, SIGHTS]
            .iter()
            .chain(MARKERS.iter())
            .map(|s| s.to_string())
            .collect();
        tokens.extend((0..=max_number).map(|n| n.to_string()));
        for w in vocab.words() {
            if tokens.iter().any(|t| t == w) {
                return Err(Error::domain(format!("event word {w:?} collides with a control token")));
            }
            tokens.push(w.to_string());
        }
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> usize {
        0
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::data(format!("unknown token {token:?}")))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn number(&self, n: usize) -> Result<usize> {
        self.id(&n.to_string())
    }

    /// Splits on whitespace, then peels trailing punctuation off each word
    /// until the remainder is a known token.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let mut body = word;
            let mut tail = Vec::new();
            while !self.ids.contains_key(body) {
                match body.chars().last() {
                    Some(c) if PHRASE_DELIMITERS.contains(&c) => {
                        tail.push(c);
                        body = &body[..body.len() - c.len_utf8()];
                    }
                    _ => break,
                }
            }
            if !body.is_empty() {
                out.push(self.id(body)?);
            }
            for c in tail.into_iter().rev() {
                out.push(self.id(&c.to_string())?);
            }
        }
        Ok(out)
    }

    /// Inverse of [`encode`](Self::encode) on well-formed text; stops at the end token.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == self.eos() {
                break;
            }
            let tok = self.token(id).unwrap_or("<unk>");
            if tok == "." {
                out.push('.');
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_vocab_shape() {
        let v = EventVocab::default();
        assert_eq!(v.visual().len(), 24);
        assert_eq!(v.audio().len(), 24);
        assert_eq!(v.id_of("red square"), Some("v00"));
        assert_eq!(v.phrase_of("a23"), Some("long beep"));
        for p in v.visual().iter().chain(v.audio()) {
            assert_eq!(v.phrase_of(v.id_of(p).unwrap()), Some(p.as_str()));
        }
        assert!(v.phrase_of("x01").is_none() && v.phrase_of("v99").is_none());
    }

    #[test]
    fn rejects_bad_vocab() {
        assert!(EventVocab::new(vec![], vec![]).is_err());
        assert!(EventVocab::new(vec!["a b".into()], vec!["a b".into()]).is_err());
        assert!(EventVocab::new(vec!["A b".into()], vec![]).is_err());
        assert!(EventVocab::new(vec!["a. b".into()], vec![]).is_err());
    }

    #[test]
    fn tokenizer_round_trip() {
        let v = EventVocab::default();
        let t = Tokenizer::new(&v, 40).unwrap();
        let text = "red square. loud bell.";
        let ids = t.encode(text).unwrap();
        assert_eq!(ids.len(), 6);
        assert_eq!(t.decode(&ids), text);
        assert_eq!(t.encode("#audio: soft drum.").unwrap().len(), 4);
        assert_eq!(t.decode(&t.encode("#audio: soft drum.").unwrap()), "#audio: soft drum.");
        assert!(matches!(t.encode("purple cow."), Err(Error::Data(_))));
        let mut with_eos = ids.clone();
        with_eos.push(t.eos());
        with_eos.push(ids[0]);
        assert_eq!(t.decode(&with_eos), text);
        assert_eq!(t.number(7).unwrap(), t.id("7").unwrap());
        assert_eq!(t.encode("#audio:. red..").unwrap().len(), 5);
    }

    proptest::proptest! {
        #[test]
        fn decode_then_encode_is_identity(ids in proptest::collection::vec(1usize..90, 0..30)) {
            let t = Tokenizer::new(&EventVocab::default(), 60).unwrap();
            proptest::prop_assert_eq!(t.encode(&t.decode(&ids)).unwrap(), ids);
        }
    }
}
