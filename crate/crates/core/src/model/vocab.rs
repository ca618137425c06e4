//! Whitespace token vocabulary for the arithmetic-chain task.
//!
//! Ids 0..6 are reserved control tokens that never appear in raw text; they
//! are assembled into sequences programmatically. Value tokens "0".."99"
//! follow, then the small closed set of template words.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

pub const BOS: usize = 0;
pub const PAD: usize = 1;
pub const THINK: usize = 2;
pub const END_THINK: usize = 3;
pub const COMPRESS: usize = 4;
pub const EOS: usize = 5;
const N_RESERVED: usize = 6;

const RESERVED: [&str; N_RESERVED] = ["<bos>", "<pad>", "<think>", "</think>", "<compress>", "<eos>"];
const WORDS: [&str; 13] = [
    "plus", "minus", "times", "equals", "then", "start", "with", "what", "is", "the", "result",
    ".", "?",
];
const MODULUS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum TokenizeError {
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
    #[error("reserved token {0:?} is not allowed in raw text")]
    ReservedInText(String),
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    by_str: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    reserved: HashMap<String, usize>,
}

impl Vocabulary {
    /// The task vocabulary: reserved controls, "0".."99", template words.
    pub fn arithmetic() -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..MODULUS).map(|v| v.to_string()));
        tokens.extend(WORDS.iter().map(|s| s.to_string()));
        let by_str = tokens.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocabulary { tokens, by_str }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_str(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Id of the value token for `v` (mod 100).
    pub fn value_token(&self, v: i64) -> usize {
        let v = v.rem_euclid(MODULUS as i64) as usize;
        N_RESERVED + v
    }

    /// The numeric value a token denotes, if it is a value token.
    pub fn token_value(&self, id: usize) -> Option<i64> {
        (N_RESERVED..N_RESERVED + MODULUS).contains(&id).then(|| (id - N_RESERVED) as i64)
    }

    pub fn is_numeric(&self, id: usize) -> bool {
        self.token_value(id).is_some()
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id < N_RESERVED
    }

    pub fn word(&self, w: &str) -> usize {
        *self.by_str.get(w).unwrap_or_else(|| panic!("word {w:?} not in vocabulary"))
    }

    /// Whitespace tokenization of raw text. Control tokens are rejected: they
    /// exist only as assembled ids, never as text.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, TokenizeError> {
        text.split_whitespace()
            .map(|w| match self.by_str.get(w) {
                Some(&id) if id < N_RESERVED => Err(TokenizeError::ReservedInText(w.to_string())),
                Some(&id) => Ok(id),
                None => Err(TokenizeError::UnknownWord(w.to_string())),
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&id| self.token_str(id)).collect::<Vec<_>>().join(" ")
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            reserved: RESERVED.iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let file: VocabFile = serde_json::from_str(s)?;
        let by_str = file.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary { tokens: file.tokens, by_str })
    }
}
