use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output symbols of the CTC head. Class 0 is the blank; symbol `i` of the
/// list is class `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    symbols: Vec<String>,
}

pub const BLANK: usize = 0;

impl Vocab {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary symbol {s:?}")));
            }
            if symbols[..i].contains(s) {
                return Err(Error::Config(format!("duplicate vocabulary symbol `{s}`")));
            }
        }
        Ok(Self { symbols })
    }

    /// Sorted set of the whitespace-separated symbols in `transcripts`.
    pub fn from_transcripts<'a>(transcripts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut set: Vec<String> = transcripts
            .into_iter()
            .flat_map(str::split_whitespace)
            .map(str::to_string)
            .collect();
        set.sort();
        set.dedup();
        Self::new(set)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Number of symbols, blank excluded.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Number of CTC classes, blank included.
    pub fn classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn class_of(&self, symbol: &str) -> Result<usize> {
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .map(|i| i + 1)
            .ok_or_else(|| Error::UnknownSymbol(symbol.to_string()))
    }

    pub fn encode(&self, transcript: &str) -> Result<Vec<usize>> {
        transcript.split_whitespace().map(|s| self.class_of(s)).collect()
    }

    /// Symbols of non-blank class ids.
    pub fn decode(&self, classes: &[usize]) -> Vec<String> {
        classes
            .iter()
            .filter(|&&c| c != BLANK && c <= self.symbols.len())
            .map(|&c| self.symbols[c - 1].clone())
            .collect()
    }
}
