use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Characters (whitespace included) mapped to dense ids; the blank takes
/// the last id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolTable {
    symbols: Vec<char>,
    content_hash: String,
}

fn hash_symbols(symbols: &[char]) -> String {
    let mut h = Sha256::new();
    for c in symbols {
        h.update((*c as u32).to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl SymbolTable {
    pub fn from_symbols(symbols: Vec<char>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::Config("symbol table needs at least one symbol".into()));
        }
        let unique: BTreeSet<char> = symbols.iter().copied().collect();
        if unique.len() != symbols.len() {
            return Err(Error::Config("duplicate symbols".into()));
        }
        let content_hash = hash_symbols(&symbols);
        Ok(Self { symbols, content_hash })
    }

    /// Sorted unique characters of the corpus plus the blank.
    pub fn build<S: AsRef<str>>(transcripts: &[S]) -> Result<Self> {
        let set: BTreeSet<char> = transcripts.iter().flat_map(|t| t.as_ref().chars()).collect();
        if set.is_empty() {
            return Err(Error::Config("cannot build a symbol table from an empty corpus".into()));
        }
        Self::from_symbols(set.into_iter().collect())
    }

    /// Printable symbols, without the blank.
    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Symbols plus the blank.
    pub fn n_symbols(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn blank(&self) -> usize {
        self.symbols.len()
    }

    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.symbols
            .binary_search(&c)
            .ok()
            .or_else(|| self.symbols.iter().position(|&s| s == c))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::Contract(format!("character {c:?} not in symbol table")))
            })
            .collect()
    }

    /// Ids outside the printable range (including the blank) are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.symbols.get(i)).collect()
    }

    /// Characters of `transcripts` the table cannot encode.
    pub fn coverage_gaps<S: AsRef<str>>(&self, transcripts: &[S]) -> Vec<char> {
        let set: BTreeSet<char> = transcripts
            .iter()
            .flat_map(|t| t.as_ref().chars())
            .filter(|&c| self.id(c).is_none())
            .collect();
        set.into_iter().collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let fresh = Self::from_symbols(t.symbols)?;
        if fresh.content_hash != t.content_hash {
            return Err(Error::Config(format!("{}: content hash mismatch", path.display())));
        }
        Ok(fresh)
    }
}
