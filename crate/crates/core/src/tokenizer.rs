//! Word-level tokenizer trained on the instruction and caption corpora.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SEP: usize = 4;
pub const NUM_SPECIALS: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>", ";"];

/// Lowercases and splits on whitespace, isolating every punctuation
/// character as its own word.
pub fn normalize_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.to_lowercase().split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars() {
            if c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace()) {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
    }
    words
}

pub fn normalize(text: &str) -> String {
    normalize_words(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
    specials: Vec<String>,
}

impl Vocabulary {
    /// Counts normalized words and keeps those seen at least `min_count`
    /// times, ordered by descending frequency then ascending word.
    pub fn train<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Vocabulary {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for w in normalize_words(text.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocabulary::from_words(kept.into_iter().map(|(w, _)| w).collect())
    }

    /// Builds a vocabulary from non-special words already in id order.
    pub fn from_words(words: Vec<String>) -> Vocabulary {
        let all: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        let index = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary { words: all, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Non-special words in id order.
    pub fn words(&self) -> &[String] {
        &self.words[NUM_SPECIALS..]
    }

    pub fn encode(&self, text: &str, add_bos_eos: bool) -> Vec<usize> {
        let mut ids = Vec::new();
        if add_bos_eos {
            ids.push(BOS);
        }
        ids.extend(normalize_words(text).iter().map(|w| self.id(w)));
        if add_bos_eos {
            ids.push(EOS);
        }
        ids
    }

    /// Drops PAD/BOS/EOS, renders UNK as `<unk>` and SEP as `;`.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out: Vec<&str> = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                _ => out.push(self.word(id).ok_or(Error::TokenOutOfRange {
                    id,
                    size: self.len(),
                })?),
            }
        }
        Ok(out.join(" "))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabFile {
            words: self.words().to_vec(),
            specials: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
        })
        .expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Vocabulary, serde_json::Error> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.specials != SPECIAL_TOKENS {
            return Err(serde::de::Error::custom("unexpected special tokens"));
        }
        Ok(Vocabulary::from_words(file.words))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_json(&text).map_err(|e| Error::json(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frequency_then_alphabetical() {
        let v = Vocabulary::train(&["a b", "a"], 1);
        assert_eq!(v.words(), ["a", "b"]);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
        let v = Vocabulary::train(&["zeta alpha", "beta"], 1);
        assert_eq!(v.words(), ["alpha", "beta", "zeta"]);
    }

    #[test]
    fn separator_is_special() {
        let v = Vocabulary::train(&["x ; y"], 1);
        assert_eq!(v.words(), ["x", "y"]);
        assert_eq!(v.encode("x ; y", false), vec![v.id("x"), SEP, v.id("y")]);
        assert_eq!(v.encode("x;y", false), v.encode("x ; y", false));
    }

    #[test]
    fn min_count_excludes_rare_words() {
        let v = Vocabulary::train(&["a b", "a"], 2);
        assert_eq!(v.words(), ["a"]);
        assert_eq!(v.encode("b", false), vec![UNK]);
    }

    #[test]
    fn encode_examples() {
        let v = Vocabulary::train(&["keep arms tight"], 1);
        assert_eq!(
            v.encode("keep arms tight", true),
            vec![BOS, v.id("keep"), v.id("arms"), v.id("tight"), EOS]
        );
        assert_eq!(v.encode("", true), vec![BOS, EOS]);
        assert_eq!(v.encode("Keep ARMS, tight.", false).len(), 5);
    }

    #[test]
    fn decode_examples() {
        let v = Vocabulary::train(&["good jump"], 1);
        let good = v.id("good");
        let jump = v.id("jump");
        assert_eq!(v.decode(&[BOS, good, jump, EOS]).unwrap(), "good jump");
        assert_eq!(v.decode(&[UNK]).unwrap(), "<unk>");
        assert_eq!(v.decode(&[good, SEP, jump]).unwrap(), "good ; jump");
        assert!(matches!(
            v.decode(&[99]),
            Err(Error::TokenOutOfRange { id: 99, size: 7 })
        ));
    }

    #[test]
    fn vocab_file_reproduces_ids() {
        let v = Vocabulary::train(&["land softly ; bend", "bend knees"], 1);
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert!(v.to_json().contains("\"specials\""));
    }

    proptest! {
        #[test]
        fn round_trip_and_prefix_monotone(
            a in proptest::collection::vec("[a-z]{1,5}|;|,", 0..8),
            b in proptest::collection::vec("[a-z]{1,5}|;|,", 0..8),
        ) {
            let (a, b) = (a.join(" "), b.join(" "));
            let v = Vocabulary::train(&[a.as_str(), b.as_str()], 1);
            for s in [&a, &b] {
                let ids = v.encode(s, true);
                prop_assert_eq!(v.decode(&ids).unwrap(), normalize(s));
            }
            let mut joined = v.encode(&a, false);
            joined.extend(v.encode(&b, false));
            prop_assert_eq!(v.encode(&format!("{a} {b}"), false), joined);
        }
    }
}
