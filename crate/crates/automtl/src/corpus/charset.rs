//! Character inventory for character-level models. Ordering defines the
//! one-hot indices, so it is part of any saved model's contract.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Charset {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

/// 66 symbols: a-z, 0-9, space, and 29 punctuation marks. The membership
/// beyond the count is an artifact choice; override it with a charset file
/// when your corpus differs.
pub const DEFAULT_PUNCT: &str = ".,!?'\":;-_@#$%&*()+=/\\<>[]{}|";

impl Charset {
    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::Format(format!("duplicate character {c:?} in charset")));
            }
        }
        Ok(Charset { chars, index })
    }

    pub fn default_66() -> Self {
        let mut chars: Vec<char> = ('a'..='z').collect();
        chars.extend('0'..='9');
        chars.push(' ');
        chars.extend(DEFAULT_PUNCT.chars());
        let cs = Charset::from_chars(chars).expect("default charset has no duplicates");
        debug_assert_eq!(cs.len(), 66);
        cs
    }

    /// One character per line; line order defines indices. A line holding a
    /// single space denotes the space character, so lines are not trimmed.
    pub fn from_file(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path)?;
        let mut chars = Vec::new();
        for (lineno, line) in content.lines().enumerate() {
            let mut it = line.chars();
            let c = it.next().ok_or_else(|| {
                Error::Format(format!("{}:{}: empty charset line", path.display(), lineno + 1))
            })?;
            if it.next().is_some() {
                return Err(Error::Format(format!(
                    "{}:{}: charset line holds more than one character",
                    path.display(),
                    lineno + 1
                )));
            }
            chars.push(c);
        }
        if chars.is_empty() {
            return Err(Error::Format(format!("{}: empty charset file", path.display())));
        }
        Charset::from_chars(chars)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.chars.len() * 2);
        for &c in &self.chars {
            out.push(c);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char_at(&self, id: usize) -> Result<char> {
        self.chars
            .get(id)
            .copied()
            .ok_or(Error::CharOutOfCharset { id, size: self.chars.len() })
    }
}
