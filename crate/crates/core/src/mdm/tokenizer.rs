//! Word-level text tokenizer with byte fallback.
//!
//! Text is split on single spaces. A word found in the vocabulary maps to one
//! id; any other word is spelled with byte tokens, whose first byte uses a
//! "start" id so word boundaries survive detokenization. Empty words (from
//! repeated spaces) have a dedicated id, which makes the round trip lossless.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const MASK_ID: usize = 3;
pub const EMPTY_ID: usize = 4;
const BYTE_START: usize = 5;
const BYTE_CONT: usize = BYTE_START + 256;
/// First id available to vocabulary words.
pub const FIRST_WORD_ID: usize = BYTE_CONT + 256;

const SPECIALS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[EMPTY]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

fn reserved_token(id: usize) -> String {
    if id < BYTE_START {
        SPECIALS[id].to_string()
    } else if id < BYTE_CONT {
        format!("<0x{:02X}>", id - BYTE_START)
    } else {
        format!("<+0x{:02X}>", id - BYTE_CONT)
    }
}

fn is_word(w: &str) -> bool {
    !w.is_empty() && !w.chars().any(char::is_whitespace)
}

impl Vocab {
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut v = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            if !is_word(&w) {
                return Err(Error::InvalidArgument(format!("invalid vocabulary word {w:?}")));
            }
            if v.index.contains_key(&w) {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary word {w:?}")));
            }
            v.index.insert(w.clone(), FIRST_WORD_ID + v.words.len());
            v.words.push(w);
        }
        Ok(v)
    }

    /// Most frequent words of `lines` until `capacity` total ids are used.
    /// Ties are broken alphabetically so the result is deterministic.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>, capacity: usize) -> Result<Self> {
        if capacity < FIRST_WORD_ID {
            return Err(Error::Config(format!(
                "text vocabulary capacity {capacity} is below the {FIRST_WORD_ID} reserved ids"
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for w in line.split(' ').filter(|w| is_word(w)) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(capacity - FIRST_WORD_ID);
        Self::from_words(ranked.into_iter().map(|(w, _)| w.to_string()))
    }

    /// Total number of ids, including reserved ones.
    pub fn len(&self) -> usize {
        FIRST_WORD_ID + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<String> {
        if id < FIRST_WORD_ID {
            Some(reserved_token(id))
        } else {
            self.words.get(id - FIRST_WORD_ID).cloned()
        }
    }

    /// `CLS`, the tokens of `text`, then `SEP`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![CLS_ID];
        ids.extend(self.encode_words(text));
        ids.push(SEP_ID);
        ids
    }

    /// Token ids without framing.
    pub fn encode_words(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        if text.is_empty() {
            return ids;
        }
        for word in text.split(' ') {
            if word.is_empty() {
                ids.push(EMPTY_ID);
            } else if let Some(id) = self.id(word) {
                ids.push(id);
            } else {
                for (i, b) in word.bytes().enumerate() {
                    ids.push(if i == 0 { BYTE_START } else { BYTE_CONT } + b as usize);
                }
            }
        }
        ids
    }

    /// Inverse of [`Vocab::tokenize`]. Framing and padding ids are skipped,
    /// a mask id renders as `[MASK]`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut words: Vec<Vec<u8>> = Vec::new();
        for &id in ids {
            match id {
                PAD_ID | CLS_ID | SEP_ID => {}
                MASK_ID => words.push(b"[MASK]".to_vec()),
                EMPTY_ID => words.push(Vec::new()),
                _ if id < BYTE_CONT => words.push(vec![(id - BYTE_START) as u8]),
                _ if id < FIRST_WORD_ID => {
                    let b = (id - BYTE_CONT) as u8;
                    match words.last_mut() {
                        Some(w) => w.push(b),
                        None => words.push(vec![b]),
                    }
                }
                _ => match self.words.get(id - FIRST_WORD_ID) {
                    Some(w) => words.push(w.as_bytes().to_vec()),
                    None => words.push(b"[UNK]".to_vec()),
                },
            }
        }
        let joined = words.join(&b' ');
        String::from_utf8_lossy(&joined).into_owned()
    }

    /// One `id<TAB>token` line per id, reserved ids included.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for id in 0..self.len() {
            let _ = writeln!(out, "{id}\t{}", self.token(id).unwrap_or_default());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut words = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::Config(format!("vocab line {}: {msg}", lineno + 1));
            let (id, token) = line.split_once('\t').ok_or_else(|| bad("expected id<TAB>token"))?;
            let id: usize = id.parse().map_err(|_| bad("id is not an integer"))?;
            if id != lineno {
                return Err(bad(&format!("expected id {lineno}, found {id}")));
            }
            if id < FIRST_WORD_ID {
                if token != reserved_token(id) {
                    return Err(bad(&format!("reserved id {id} must be {}", reserved_token(id))));
                }
            } else {
                words.push(token.to_string());
            }
        }
        Self::from_words(words)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["a red square", "a blue frame"], 600).unwrap()
    }

    #[test]
    fn empty_text_is_cls_sep() {
        assert_eq!(vocab().tokenize(""), vec![CLS_ID, SEP_ID]);
    }

    #[test]
    fn repeated_words_repeat_ids() {
        let ids = vocab().tokenize("a a a");
        assert_eq!(ids.len(), 5);
        assert!(ids[1] == ids[2] && ids[2] == ids[3]);
        assert!(ids[1] >= FIRST_WORD_ID);
    }

    #[test]
    fn byte_fallback_round_trips() {
        let v = vocab();
        for s in ["zebra  crossing", " x", "héllo wörld\t!", "a  ", " "] {
            assert_eq!(v.detokenize(&v.tokenize(s)), s);
        }
    }

    #[test]
    fn file_format_round_trips() {
        let v = vocab();
        let parsed = Vocab::parse(&v.to_file_string()).unwrap();
        assert_eq!(parsed, v);
        assert!(Vocab::parse("0\t[PAD]\n2\t[SEP]\n").is_err());
    }

    #[test]
    fn capacity_truncates_by_frequency() {
        let v = Vocab::build(["b b b a a c"], FIRST_WORD_ID + 2).unwrap();
        assert_eq!(v.id("b"), Some(FIRST_WORD_ID));
        assert_eq!(v.id("a"), Some(FIRST_WORD_ID + 1));
        assert_eq!(v.id("c"), None);
    }
}
