//! Whole-word vocabulary with byte fallback.
//!
//! File format: one token per line, the line number is the id. Ids 0..=2 are
//! `<pad>`, `</s>` and `<context>`; the 256 byte tokens `<0x00>`..`<0xFF>`
//! must appear contiguously and in order somewhere in the file.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const CONTEXT_ID: usize = 2;

const RESERVED: [&str; 3] = ["<pad>", "</s>", "<context>"];

/// Words the synthetic corpus and its question templates rely on.
pub const DEFAULT_WORDS: &[&str] = &[
    "what", "is", "written", "in", "the", "top", "bottom", "left", "right", "word", "below", "above",
    "next", "to", "of", "which", "sign", "corner", "center", "closest", "stop", "open", "exit", "sale",
    "fine", "food", "spirits", "card", "stock", "paper", "fabric", "coffee", "hotel", "bank", "taxi",
    "pizza", "metro", "music", "books", "bakery", "police", "garden", "market", "cinema", "museum",
    "river", "north", "south", "east", "west", "station", "street", "avenue", "lane", "road", "park",
    "car", "bus", "bottle", "person", "door", "window", "tree", "table", "clock", "phone", "cup",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    words: HashMap<String, usize>,
    byte_offset: usize,
}

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

impl Vocab {
    /// Reserved tokens, then the byte tokens, then `words`.
    pub fn with_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut lines: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        lines.extend((0..=255u8).map(byte_token));
        lines.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::from_tokens(lines)
    }

    pub fn default_vocab() -> Self {
        Self::with_words(DEFAULT_WORDS).expect("built-in vocabulary is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (id, name) in RESERVED.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*name) {
                return Err(Error::Parse {
                    line: id + 1,
                    message: format!("expected reserved token `{name}`"),
                });
            }
        }
        let first_byte = byte_token(0);
        let byte_offset = tokens
            .iter()
            .position(|t| *t == first_byte)
            .ok_or_else(|| Error::InvalidInput("vocabulary lacks byte-fallback tokens".into()))?;
        for b in 0..=255u8 {
            let id = byte_offset + b as usize;
            if tokens.get(id) != Some(&byte_token(b)) {
                return Err(Error::Parse {
                    line: id + 1,
                    message: format!("expected byte token `{}`", byte_token(b)),
                });
            }
        }
        let mut words = HashMap::new();
        for (id, t) in tokens.iter().enumerate() {
            if id < RESERVED.len() || (byte_offset..byte_offset + 256).contains(&id) {
                continue;
            }
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    line: id + 1,
                    message: "vocabulary words must be non-empty and contain no whitespace".into(),
                });
            }
            if words.insert(t.clone(), id).is_some() {
                return Err(Error::Parse {
                    line: id + 1,
                    message: format!("duplicate token `{t}`"),
                });
            }
        }
        Ok(Self {
            tokens,
            words,
            byte_offset,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn byte_offset(&self) -> usize {
        self.byte_offset
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        self.words.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    fn byte_of(&self, id: usize) -> Option<u8> {
        (self.byte_offset..self.byte_offset + 256)
            .contains(&id)
            .then(|| (id - self.byte_offset) as u8)
    }

    pub fn is_byte(&self, id: usize) -> bool {
        self.byte_of(id).is_some()
    }

    /// Whitespace-split words become whole-word ids when known, byte ids
    /// otherwise. Adjacent unknown words are joined by a space byte so the
    /// word boundary survives.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        let mut prev_was_bytes = false;
        for word in text.split_whitespace() {
            match self.word_id(word) {
                Some(id) => {
                    ids.push(id);
                    prev_was_bytes = false;
                }
                None => {
                    if prev_was_bytes {
                        ids.push(self.byte_offset + b' ' as usize);
                    }
                    ids.extend(word.bytes().map(|b| self.byte_offset + b as usize));
                    prev_was_bytes = true;
                }
            }
        }
        ids
    }

    /// Inverse of [`Vocab::tokenize`] up to whitespace normalization.
    /// Reserved ids render as nothing.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut pieces: Vec<String> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, pieces: &mut Vec<String>| {
            if !bytes.is_empty() {
                pieces.push(String::from_utf8_lossy(bytes).into_owned());
                bytes.clear();
            }
        };
        for &id in ids {
            if id >= self.tokens.len() {
                return Err(Error::InvalidInput(format!(
                    "token id {id} outside vocabulary of {}",
                    self.tokens.len()
                )));
            }
            if let Some(b) = self.byte_of(id) {
                bytes.push(b);
                continue;
            }
            flush(&mut bytes, &mut pieces);
            if id >= RESERVED.len() {
                pieces.push(self.tokens[id].clone());
            }
        }
        flush(&mut bytes, &mut pieces);
        Ok(normalize_whitespace(&pieces.join(" ")))
    }
}

pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text() {
        let v = Vocab::default_vocab();
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.detokenize(&[]).unwrap(), "");
    }

    #[test]
    fn known_word_is_single_id() {
        let v = Vocab::default_vocab();
        let k = v.word_id("stop").unwrap();
        assert_eq!(v.tokenize("stop"), vec![k]);
        assert_eq!(v.token(k), Some("stop"));
    }

    #[test]
    fn unknown_word_falls_back_to_bytes() {
        let v = Vocab::default_vocab();
        let off = v.byte_offset();
        let ids = v.tokenize("zxq");
        assert_eq!(ids, vec![off + 0x7a, off + 0x78, off + 0x71]);
        assert_eq!(v.detokenize(&ids).unwrap(), "zxq");
    }

    #[test]
    fn round_trips() {
        let v = Vocab::default_vocab();
        for t in ["fine food", "  fine   zxq food ", "zxq abc", "stop zxq abc open", "héllo wörld"] {
            assert_eq!(v.detokenize(&v.tokenize(t)).unwrap(), normalize_whitespace(t));
        }
    }

    #[test]
    fn unknown_id_rejected() {
        let v = Vocab::default_vocab();
        assert!(matches!(v.detokenize(&[v.len()]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn file_round_trip_and_validation() {
        let v = Vocab::default_vocab();
        assert_eq!(Vocab::parse(&v.to_file_string()).unwrap(), v);
        assert_eq!(v.token(PAD_ID), Some("<pad>"));
        assert_eq!(v.token(EOS_ID), Some("</s>"));
        assert_eq!(v.token(CONTEXT_ID), Some("<context>"));
        assert!(Vocab::parse("<pad>\n</s>\n").is_err());
        let mut dup = v.to_file_string();
        dup.push_str("stop\n");
        assert!(matches!(Vocab::parse(&dup), Err(Error::Parse { .. })));
    }

    proptest! {
        #[test]
        fn tokenize_round_trip(words in prop::collection::vec("[a-z]{1,6}|stop|food|[0-9]{1,3}", 0..8)) {
            let v = Vocab::default_vocab();
            let text = words.join(" ");
            let ids = v.tokenize(&text);
            prop_assert_eq!(v.detokenize(&ids).unwrap(), normalize_whitespace(&text));
            prop_assert_eq!(v.tokenize(&text), ids);
        }
    }
}
