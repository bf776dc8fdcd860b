//! Word-level toy vocabulary and prompt templating.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const IMAGE: u32 = 3;
pub const UNK: u32 = 4;
/// Ids below this are reserved for special tokens.
pub const FIRST_WORD: u32 = 16;
pub const RED: u32 = 16;
pub const GREEN: u32 = 17;
pub const BLUE: u32 = 18;

pub const TOY_VOCAB_SIZE: usize = 512;
pub const VOCAB_VERSION: &str = "toy-words-v1";

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<image>", "<unk>"];

/// Registered words, assigned ids from [`FIRST_WORD`] upwards in this order.
const WORDS: &[&str] = &[
    "red",
    "green",
    "blue",
    "what",
    "is",
    "shown",
    "in",
    "the",
    "picture",
    "a",
    "b",
    "or",
    "concept",
    "it",
    "an",
    "image",
    "of",
    "name",
    "object",
    "this",
    "format",
    "depicts",
    "goldfish",
    "fishfish",
    "golden",
    "retriever",
    "tiger",
    "pretzel",
    "corn",
    "dog",
    "describe",
    "content",
    "shows",
    "features",
    "with",
    "color",
    "colour",
    "which",
    "answer",
    "blob",
    "and",
    "scales",
    "orange",
    "fish",
    "bright",
    "round",
    "body",
    "fins",
    "eyes",
    "swimming",
    "<object>",
    ":",
    ".",
    ",",
    "?",
    "!",
    ";",
];

const PUNCTUATION: &[char] = &[':', '.', ',', '?', '!', ';'];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn toy() -> Self {
        let mut words: Vec<String> = Vec::with_capacity(TOY_VOCAB_SIZE);
        for i in 0..FIRST_WORD as usize {
            words.push(
                SPECIALS
                    .get(i)
                    .map(|s| s.to_string())
                    .unwrap_or(format!("<reserved_{i}>")),
            );
        }
        words.extend(WORDS.iter().map(|w| w.to_string()));
        while words.len() < TOY_VOCAB_SIZE {
            words.push(format!("<tok_{}>", words.len()));
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Lowercases, splits on whitespace and splits trailing/leading punctuation
    /// into separate tokens.
    pub fn split(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for raw in text.to_lowercase().split_whitespace() {
            let mut current = String::new();
            for ch in raw.chars() {
                if PUNCTUATION.contains(&ch) {
                    if !current.is_empty() {
                        out.push(std::mem::take(&mut current));
                    }
                    out.push(ch.to_string());
                } else {
                    current.push(ch);
                }
            }
            if !current.is_empty() {
                out.push(current);
            }
        }
        out
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let pieces = Self::split(text);
        let unknown: Vec<String> = pieces
            .iter()
            .filter(|p| self.id(p).is_none())
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownWords(unknown));
        }
        Ok(pieces.iter().filter_map(|p| self.id(p)).collect())
    }

    /// Joins the words of non-special ids with single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id >= FIRST_WORD)
            .filter_map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    vocab_size: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("token sequence is empty".into()));
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(Self { ids, vocab_size })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub const TARGET_SLOT: &str = "[target]";
pub const NEGATIVE_SLOT: &str = "[negative]";

/// A prompt template with a required `[target]` slot.
///
/// An optional `[negative]` slot must sit inside a `{ ... }` group; the whole
/// group is dropped when no negative text is given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub template: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative: Option<String>,
}

impl PromptSpec {
    pub fn new(template: &str, target: &str, negative: Option<&str>) -> Self {
        Self {
            template: template.to_string(),
            target: target.to_string(),
            negative: negative.map(str::to_string),
        }
    }

    pub fn render(&self) -> Result<String> {
        if !self.template.contains(TARGET_SLOT) {
            return Err(Error::Prompt(format!(
                "template lacks the {TARGET_SLOT} slot"
            )));
        }
        if self.target.trim().is_empty() {
            return Err(Error::Prompt("target text is empty".into()));
        }
        let mut out = String::with_capacity(self.template.len());
        let mut rest = self.template.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| Error::Prompt("unbalanced '{' in template".into()))?;
            let group = &rest[open + 1..open + close];
            if let Some(neg) = &self.negative {
                out.push_str(&group.replace(NEGATIVE_SLOT, neg));
            }
            rest = &rest[open + close + 1..];
        }
        out.push_str(rest);
        if out.contains(NEGATIVE_SLOT) {
            return Err(Error::Prompt(format!(
                "{NEGATIVE_SLOT} must appear inside an optional {{...}} group"
            )));
        }
        let rendered = out.replace(TARGET_SLOT, &self.target);
        if rendered.contains('[') && rendered.contains(']') {
            return Err(Error::Prompt(format!(
                "unfilled slot in rendered prompt: {rendered}"
            )));
        }
        Ok(rendered.split_whitespace().collect::<Vec<_>>().join(" "))
    }
}
