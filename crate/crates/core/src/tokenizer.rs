//! Character-level tokenizers for the toy language and acoustic models.

use std::collections::HashMap;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
const SPECIALS: usize = 4;

#[derive(Clone, Debug)]
pub struct CharTokenizer {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharTokenizer {
    fn from_chars(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + SPECIALS)).collect();
        Self { chars, index }
    }

    /// Newline plus printable ASCII.
    pub fn lm() -> Self {
        let mut chars = vec!['\n'];
        chars.extend((32u8..=126).map(char::from));
        Self::from_chars(chars)
    }

    /// Lowercase letters, space and the punctuation the transcripts use.
    pub fn acoustic() -> Self {
        let mut chars: Vec<char> = " '-.?".chars().collect();
        chars.extend('a'..='z');
        Self::from_chars(chars)
    }

    pub fn vocab_size(&self) -> usize {
        self.chars.len() + SPECIALS
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    /// Character ids; unknown characters map to [`UNK`] and are logged.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let (ids, unknown) = self.tokenize_counting(text);
        if unknown > 0 {
            log::warn!("{unknown} unknown character(s) mapped to UNK in {text:?}");
        }
        ids
    }

    /// Like [`CharTokenizer::tokenize`], also returning the number of UNK ids.
    pub fn tokenize_counting(&self, text: &str) -> (Vec<usize>, usize) {
        let mut unknown = 0;
        let ids = text
            .chars()
            .map(|c| {
                self.index.get(&c).copied().unwrap_or_else(|| {
                    unknown += 1;
                    UNK
                })
            })
            .collect();
        (ids, unknown)
    }

    /// Inverse of `tokenize`; special ids other than UNK produce no text.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&id| match id {
                UNK => Some(char::REPLACEMENT_CHARACTER),
                PAD | BOS | EOS => None,
                _ => self.chars.get(id - SPECIALS).copied(),
            })
            .collect()
    }

    pub fn newline(&self) -> Option<usize> {
        self.index.get(&'\n').copied()
    }
}
