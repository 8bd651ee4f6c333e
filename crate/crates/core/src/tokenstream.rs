//! Construction of the multimodal token sequence: question tokens, then OCR
//! subtokens (separated according to a [`SeparationStrategy`]), then one token
//! per detected object.

use std::ops::Range;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{assign_patch, NormalizedBBox, PatchCoord, PatchGrid};
use crate::vocab::{Vocab, CONTEXT_ID};

/// How consecutive OCR entries are told apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SeparationStrategy {
    /// Subtokens are concatenated as if they formed one sentence.
    None,
    /// The last subtoken of each entry also receives the `<context>`
    /// embedding and the entry's visual and box features.
    Tag,
    /// Position ids skip one step at every entry boundary.
    Index,
    /// A `<context>` separator token follows every entry.
    Tss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenSource {
    Question,
    OcrSub,
    Separator,
    Obj,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcrEntry {
    pub text: String,
    pub bbox: NormalizedBBox,
    /// Region feature; empty means "absent" and is treated as zeros.
    pub visual: Vec<f64>,
    /// Cached tokenization of `text`; recomputed when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subtokens: Vec<usize>,
}

impl OcrEntry {
    pub fn new(text: impl Into<String>, bbox: NormalizedBBox, visual: Vec<f64>) -> Result<Self> {
        let e = Self {
            text: text.into(),
            bbox,
            visual,
            subtokens: Vec::new(),
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::InvalidInput("OCR text must be non-empty".into()));
        }
        self.bbox.validate()
    }

    pub fn tokenize(&mut self, vocab: &Vocab) {
        self.subtokens = vocab.tokenize(&self.text);
    }

    fn ids(&self, vocab: &Vocab) -> Vec<usize> {
        if self.subtokens.is_empty() {
            vocab.tokenize(&self.text)
        } else {
            self.subtokens.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjEntry {
    pub label: String,
    pub bbox: NormalizedBBox,
    pub visual: Vec<f64>,
}

impl ObjEntry {
    pub fn new(label: impl Into<String>, bbox: NormalizedBBox, visual: Vec<f64>) -> Result<Self> {
        let e = Self {
            label: label.into(),
            bbox,
            visual,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label.trim().is_empty() {
            return Err(Error::InvalidInput("object label must be non-empty".into()));
        }
        self.bbox.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub vocab_id: usize,
    pub source: TokenSource,
    pub entry_index: Option<usize>,
    pub patch: Option<PatchCoord>,
    pub position_id: usize,
    /// Tag strategy: this subtoken also carries the `<context>` embedding and
    /// its entry's region features.
    #[serde(default)]
    pub context_tag: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenStream {
    pub tokens: Vec<Token>,
    pub question_len: usize,
    pub ocr_span: Range<usize>,
    pub obj_span: Range<usize>,
    pub strategy: SeparationStrategy,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ocr_tokens(&self) -> &[Token] {
        &self.tokens[self.ocr_span.clone()]
    }

    pub fn count(&self, source: TokenSource) -> usize {
        self.tokens.iter().filter(|t| t.source == source).count()
    }

    pub fn position_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.position_id).collect()
    }

    /// Drops separator tokens and renumbers positions consecutively, which
    /// for a TSS stream yields the stream the NONE strategy builds.
    pub fn strip_separators(&self) -> TokenStream {
        let keep = |r: &Range<usize>| {
            let removed_before = self.tokens[..r.start]
                .iter()
                .filter(|t| t.source == TokenSource::Separator)
                .count();
            let removed_in = self.tokens[r.clone()]
                .iter()
                .filter(|t| t.source == TokenSource::Separator)
                .count();
            (r.start - removed_before)..(r.end - removed_before - removed_in)
        };
        let tokens = self
            .tokens
            .iter()
            .filter(|t| t.source != TokenSource::Separator)
            .enumerate()
            .map(|(i, t)| Token {
                position_id: i,
                ..t.clone()
            })
            .collect();
        TokenStream {
            tokens,
            question_len: self.question_len,
            ocr_span: keep(&self.ocr_span),
            obj_span: keep(&self.obj_span),
            strategy: SeparationStrategy::None,
        }
    }

    /// Patches of the OCR segment, in token order.
    pub fn ocr_patches(&self) -> Vec<PatchCoord> {
        self.ocr_tokens()
            .iter()
            .map(|t| t.patch.expect("OCR-segment tokens carry a patch"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamLimits {
    pub max_question_tokens: usize,
    pub max_ocr_tokens: usize,
    pub max_obj_tokens: usize,
}

impl Default for StreamLimits {
    fn default() -> Self {
        Self {
            max_question_tokens: 45,
            max_ocr_tokens: 350,
            max_obj_tokens: 250,
        }
    }
}

pub struct StreamBuilder<'a> {
    pub vocab: &'a Vocab,
    pub grid: PatchGrid,
    pub limits: StreamLimits,
}

impl<'a> StreamBuilder<'a> {
    pub fn new(vocab: &'a Vocab, grid: PatchGrid, limits: StreamLimits) -> Self {
        Self { vocab, grid, limits }
    }

    pub fn build(
        &self,
        question: &str,
        ocr: &[OcrEntry],
        obj: &[ObjEntry],
        strategy: SeparationStrategy,
    ) -> Result<TokenStream> {
        let mut q_ids = self.vocab.tokenize(question);
        if q_ids.is_empty() {
            return Err(Error::InvalidInput("question must be non-empty".into()));
        }
        if q_ids.len() > self.limits.max_question_tokens {
            warn!(
                "question truncated from {} to {} tokens",
                q_ids.len(),
                self.limits.max_question_tokens
            );
            q_ids.truncate(self.limits.max_question_tokens);
        }

        let mut tokens = Vec::new();
        let mut pos = 0usize;
        for &id in &q_ids {
            tokens.push(Token {
                vocab_id: id,
                source: TokenSource::Question,
                entry_index: None,
                patch: None,
                position_id: pos,
                context_tag: false,
            });
            pos += 1;
        }
        let question_len = tokens.len();

        let ocr_start = tokens.len();
        let mut used = 0usize;
        for (k, entry) in ocr.iter().enumerate() {
            entry.validate()?;
            let ids = entry.ids(self.vocab);
            let cost = ids.len() + usize::from(strategy == SeparationStrategy::Tss);
            if used + cost > self.limits.max_ocr_tokens {
                warn!(
                    "OCR segment truncated: kept {k} of {} entries ({} token limit)",
                    ocr.len(),
                    self.limits.max_ocr_tokens
                );
                break;
            }
            used += cost;
            let patch = assign_patch(&entry.bbox, self.grid)?;
            if strategy == SeparationStrategy::Index && k > 0 {
                pos += 1;
            }
            let last = ids.len() - 1;
            for (s, &id) in ids.iter().enumerate() {
                tokens.push(Token {
                    vocab_id: id,
                    source: TokenSource::OcrSub,
                    entry_index: Some(k),
                    patch: Some(patch),
                    position_id: pos,
                    context_tag: strategy == SeparationStrategy::Tag && s == last,
                });
                pos += 1;
            }
            if strategy == SeparationStrategy::Tss {
                tokens.push(Token {
                    vocab_id: CONTEXT_ID,
                    source: TokenSource::Separator,
                    entry_index: Some(k),
                    patch: Some(patch),
                    position_id: pos,
                    context_tag: false,
                });
                pos += 1;
            }
        }
        let ocr_span = ocr_start..tokens.len();

        if obj.len() > self.limits.max_obj_tokens {
            warn!(
                "objects truncated from {} to {}",
                obj.len(),
                self.limits.max_obj_tokens
            );
        }
        let obj_start = tokens.len();
        for (k, entry) in obj.iter().take(self.limits.max_obj_tokens).enumerate() {
            entry.validate()?;
            let id = *self
                .vocab
                .tokenize(&entry.label)
                .first()
                .ok_or_else(|| Error::InvalidInput("object label must be non-empty".into()))?;
            tokens.push(Token {
                vocab_id: id,
                source: TokenSource::Obj,
                entry_index: Some(k),
                patch: None,
                position_id: pos,
                context_tag: false,
            });
            pos += 1;
        }
        let obj_span = obj_start..tokens.len();

        Ok(TokenStream {
            tokens,
            question_len,
            ocr_span,
            obj_span,
            strategy,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bbox(x: f64, y: f64) -> NormalizedBBox {
        NormalizedBBox::new(x, y, x + 0.05, y + 0.05).unwrap()
    }

    fn builder(v: &Vocab) -> StreamBuilder<'_> {
        StreamBuilder::new(v, PatchGrid::default(), StreamLimits::default())
    }

    fn entry(text: &str, x: f64, y: f64) -> OcrEntry {
        OcrEntry::new(text, bbox(x, y), vec![]).unwrap()
    }

    #[test]
    fn tss_two_single_subtoken_entries() {
        let v = Vocab::default_vocab();
        let s = builder(&v)
            .build("what is written", &[entry("stop", 0.1, 0.1), entry("open", 0.5, 0.5)], &[], SeparationStrategy::Tss)
            .unwrap();
        let ocr = s.ocr_tokens();
        assert_eq!(ocr.len(), 4);
        assert_eq!(ocr[1].source, TokenSource::Separator);
        assert_eq!(ocr[3].source, TokenSource::Separator);
        assert_eq!(ocr[1].vocab_id, CONTEXT_ID);
        assert_eq!(s.question_len, 3);
        assert_eq!(s.count(TokenSource::Separator), 2);
    }

    #[test]
    fn index_strategy_shifts_positions_at_boundaries() {
        let v = Vocab::with_words(&["Card", "Stock", "what"]).unwrap();
        let entries = [entry("Card Stock", 0.1, 0.1), entry("3pieces", 0.3, 0.1)];
        let rel = |strategy| {
            let s = builder(&v).build("what", &entries, &[], strategy).unwrap();
            let base = s.ocr_tokens()[0].position_id;
            s.ocr_tokens()
                .iter()
                .filter(|t| t.source == TokenSource::OcrSub)
                .map(|t| t.position_id - base)
                .collect::<Vec<_>>()
        };
        // "3pieces" is out of vocabulary: 7 byte tokens.
        assert_eq!(rel(SeparationStrategy::None), (0..9).collect::<Vec<_>>());
        let mut index = vec![0, 1];
        index.extend(3..10);
        assert_eq!(rel(SeparationStrategy::Index), index);
    }

    #[test]
    fn index_strategy_single_subtoken_entries() {
        let v = Vocab::with_words(&["Card", "Stock", "pieces", "what"]).unwrap();
        let entries = [entry("Card Stock", 0.1, 0.1), entry("pieces", 0.3, 0.1)];
        for (strategy, expect) in [(SeparationStrategy::None, vec![0, 1, 2]), (SeparationStrategy::Index, vec![0, 1, 3])] {
            let s = builder(&v).build("what", &entries, &[], strategy).unwrap();
            let base = s.ocr_tokens()[0].position_id;
            let got: Vec<_> = s.ocr_tokens().iter().map(|t| t.position_id - base).collect();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn tag_marks_last_subtoken_only() {
        let v = Vocab::default_vocab();
        let s = builder(&v)
            .build("what", &[entry("fine food", 0.1, 0.1), entry("stop", 0.5, 0.5)], &[], SeparationStrategy::Tag)
            .unwrap();
        let tags: Vec<_> = s.ocr_tokens().iter().map(|t| t.context_tag).collect();
        assert_eq!(tags, vec![false, true, true]);
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn empty_question_rejected_and_empty_ocr_allowed() {
        let v = Vocab::default_vocab();
        let b = builder(&v);
        assert!(matches!(b.build("  ", &[], &[], SeparationStrategy::Tss), Err(Error::InvalidInput(_))));
        let s = b.build("what", &[], &[], SeparationStrategy::Tss).unwrap();
        assert!(s.ocr_span.is_empty());
    }

    #[test]
    fn objects_take_first_label_subtoken() {
        let v = Vocab::default_vocab();
        let obj = ObjEntry::new("car door", bbox(0.2, 0.2), vec![]).unwrap();
        let s = builder(&v).build("what", &[], &[obj], SeparationStrategy::None).unwrap();
        assert_eq!(s.obj_span, 1..2);
        assert_eq!(s.tokens[1].vocab_id, v.word_id("car").unwrap());
        assert_eq!(s.tokens[1].source, TokenSource::Obj);
    }

    #[test]
    fn truncation_keeps_whole_entries() {
        let v = Vocab::default_vocab();
        let limits = StreamLimits {
            max_question_tokens: 2,
            max_ocr_tokens: 5,
            max_obj_tokens: 0,
        };
        let b = StreamBuilder::new(&v, PatchGrid::default(), limits);
        let entries = [entry("stop", 0.1, 0.1), entry("fine food", 0.2, 0.2), entry("open", 0.3, 0.3)];
        let obj = ObjEntry::new("car", bbox(0.2, 0.2), vec![]).unwrap();
        let s = b.build("what is written", &entries, &[obj], SeparationStrategy::Tss).unwrap();
        assert_eq!(s.question_len, 2);
        assert_eq!(s.count(TokenSource::Separator), 2);
        assert_eq!(s.ocr_span.len(), 5);
        assert!(s.obj_span.is_empty());
    }
}
