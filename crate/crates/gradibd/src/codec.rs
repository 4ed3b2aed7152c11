//! ICD code normalization and integer vocabulary.
//!
//! Raw alphanumeric codes ("K50.90") are truncated to chapter level by
//! keeping the first three characters, uppercased, and mapped to dense
//! integer ids. A reserved `<UNK>` id (always the last slot) absorbs
//! codes never seen at vocabulary-build time.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("empty code string")]
    EmptyCode,
    #[error("code {0:?} has fewer than 3 characters")]
    ShortCode(String),
}

/// Truncate a raw ICD code to chapter level: uppercased first 3 characters.
///
/// Codes shorter than 3 characters are rejected rather than padded;
/// fabricating a chapter from a malformed input would be silent data
/// corruption.
pub fn truncate_code(raw: &str) -> Result<String, CodecError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(CodecError::EmptyCode);
    }
    if trimmed.chars().count() < 3 {
        return Err(CodecError::ShortCode(trimmed.to_string()));
    }
    Ok(trimmed.chars().take(3).map(|c| c.to_ascii_uppercase()).collect())
}

/// Immutable mapping between chapter-level code strings and dense ids.
///
/// Ids `0..codes.len()` index the stored codes in lexicographic order;
/// the final id is reserved for unseen codes. Safe to share across
/// threads once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeVocab {
    codes: Vec<String>,
    index: HashMap<String, usize>,
}

impl CodeVocab {
    /// Build a vocabulary from any iterator of raw code strings.
    ///
    /// Duplicates collapse; ordering is lexicographic over truncated
    /// codes so the same multiset always yields the same ids.
    pub fn build<I, S>(corpus: I) -> Result<Self, CodecError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for raw in corpus {
            set.insert(truncate_code(raw.as_ref())?);
        }
        Ok(Self::from_sorted(set.into_iter().collect()))
    }

    fn from_sorted(codes: Vec<String>) -> Self {
        let index = codes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        Self { codes, index }
    }

    /// Total vocabulary size including the reserved unknown slot.
    pub fn n(&self) -> usize {
        self.codes.len() + 1
    }

    /// Id reserved for codes outside the vocabulary (always the last slot).
    pub fn unk_id(&self) -> usize {
        self.codes.len()
    }

    /// Map a raw code to its id, falling back to [`unk_id`](Self::unk_id).
    pub fn encode(&self, raw: &str) -> Result<usize, CodecError> {
        let chapter = truncate_code(raw)?;
        Ok(self.index.get(&chapter).copied().unwrap_or(self.unk_id()))
    }

    /// The stored chapter string for an id, or `None` for the unknown slot.
    pub fn decode(&self, id: usize) -> Option<&str> {
        self.codes.get(id).map(String::as_str)
    }

    /// Stored chapter codes in id order (the unknown slot is implicit).
    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    /// Write one truncated code per line in id order. The unknown slot
    /// is implicit and never written.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for code in &self.codes {
            writeln!(f, "{code}")?;
        }
        f.flush()
    }

    /// Load a vocabulary previously written by [`save`](Self::save).
    ///
    /// Line order is trusted as id order; lines must already be
    /// chapter-level (3 characters) and sorted, which `save` guarantees.
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut codes = Vec::new();
        for line in f.lines() {
            let line = line?;
            let line = line.trim();
            if !line.is_empty() {
                codes.push(line.to_string());
            }
        }
        Ok(Self::from_sorted(codes))
    }
}
