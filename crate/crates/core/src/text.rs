//! Character-level text frontend.
//!
//! Decoding stops when attention reaches the final character, so every
//! synthesis input is guaranteed to end in a period.

use std::collections::HashMap;

use crate::error::VoxError;

pub const PERIOD: char = '.';

/// Default charset: lowercase letters, space and basic punctuation.
pub const DEFAULT_SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyz0123456789 .,?!'-";

#[derive(Clone, Debug)]
pub struct Charset {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Default for Charset {
    fn default() -> Self {
        Charset::new(DEFAULT_SYMBOLS.chars().collect())
    }
}

impl Charset {
    pub fn new(symbols: Vec<char>) -> Self {
        assert!(symbols.contains(&PERIOD), "charset must include '.'");
        let index = symbols.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Charset { symbols, index }
    }

    /// One symbol per line, UTF-8. A line holding nothing encodes the space
    /// character (trailing whitespace is otherwise trimmed away).
    pub fn parse(text: &str) -> Result<Self, VoxError> {
        let mut symbols = Vec::new();
        for line in text.lines() {
            let t = line.trim_end_matches(['\r', '\n']);
            let mut chars = t.chars();
            let c = chars.next().unwrap_or(' ');
            if chars.next().is_some() {
                return Err(VoxError::Text(format!(
                    "charset line `{t}` holds more than one symbol"
                )));
            }
            symbols.push(c);
        }
        if !symbols.contains(&PERIOD) {
            return Err(VoxError::Text("charset must include '.'".into()));
        }
        Ok(Charset::new(symbols))
    }

    pub fn serialize(&self) -> String {
        self.symbols.iter().map(|&c| format!("{c}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn period_id(&self) -> usize {
        self.index[&PERIOD]
    }
}

#[derive(Clone, Debug)]
pub struct CharacterSequence {
    pub ids: Vec<usize>,
    pub normalized_text: String,
    /// Characters outside the charset dropped during normalization.
    pub dropped: usize,
}

impl CharacterSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn last_char_index(&self) -> usize {
        self.ids.len() - 1
    }
}

/// Lowercase, drop out-of-charset characters, ensure a sentence-final period.
pub fn normalize_and_encode_text(
    text: &str,
    charset: &Charset,
) -> Result<CharacterSequence, VoxError> {
    if text.is_empty() {
        return Err(VoxError::Text("empty input text".into()));
    }
    let mut normalized = String::new();
    let mut dropped = 0usize;
    for c in text.to_lowercase().chars() {
        if charset.id_of(c).is_some() {
            normalized.push(c);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        eprintln!("warning: dropped {dropped} out-of-charset character(s)");
    }
    if normalized.trim().is_empty() {
        return Err(VoxError::Text(format!(
            "text `{text}` is empty after normalization"
        )));
    }
    if !normalized.ends_with(PERIOD) {
        normalized.push(PERIOD);
    }
    let ids = normalized
        .chars()
        .map(|c| charset.id_of(c).unwrap())
        .collect();
    Ok(CharacterSequence {
        ids,
        normalized_text: normalized,
        dropped,
    })
}
