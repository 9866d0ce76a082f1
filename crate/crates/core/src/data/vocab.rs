use std::collections::HashMap;

use crate::peft::MAX_TEXT_TOKENS;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white"];
pub const SHAPES: [&str; 2] = ["square", "circle"];
pub const DIRECTIONS: [&str; 5] = ["left", "right", "up", "down", "nowhere"];

const OTHER_WORDS: [&str; 14] = [
    "track",
    "the",
    "moving",
    "follow",
    "object",
    "target",
    "a",
    "an",
    "is",
    "small",
    "large",
    "shape",
    "rectangle",
    "ellipse",
];

/// Fixed bidirectional word/id table. Id 0 is padding, id 1 unknown.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Entries before reserved padding.
    pub fn min_size() -> usize {
        2 + COLORS.len() + SHAPES.len() + DIRECTIONS.len() + OTHER_WORDS.len()
    }

    /// The built-in vocabulary padded with reserved entries to `size`.
    pub fn with_size(size: usize) -> Self {
        let mut words: Vec<String> = vec!["<pad>".into(), "<unk>".into()];
        for w in COLORS.iter().chain(&SHAPES).chain(&DIRECTIONS).chain(&OTHER_WORDS) {
            words.push(w.to_string());
        }
        assert!(size >= Self::min_size(), "vocabulary needs at least {} entries", Self::min_size());
        let mut k = 0;
        while words.len() < size {
            words.push(format!("<reserved{k}>"));
            k += 1;
        }
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, ids }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::with_size(64)
    }
}

/// Lowercases, strips punctuation, maps words to ids (unknown words to
/// [`UNK`]) and truncates to [`MAX_TEXT_TOKENS`]. Never returns an empty
/// sequence.
pub fn tokenize(sentence: &str, vocab: &Vocabulary) -> Vec<usize> {
    let cleaned: String = sentence
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    let mut ids: Vec<usize> =
        cleaned.split_whitespace().take(MAX_TEXT_TOKENS).map(|w| vocab.id(w).unwrap_or(UNK)).collect();
    if ids.is_empty() {
        ids.push(UNK);
    }
    ids
}
