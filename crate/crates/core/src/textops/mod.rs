//! Word-level text algebra shared by construction and evaluation.
//!
//! Every module tokenizes the same way: trim, then split on Unicode
//! whitespace. Punctuation stays attached to its word, so `"early."` is one
//! token. [`WordSequence`] holds the canonical token list.

mod edit;
mod lemma;

pub use edit::{word_edit_distance, EditOp, EditScript};
pub use lemma::lemmatize;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The literal token that replaces erased words.
pub const REDACTED: &str = "[REDACTED]";

/// Sentinel counted for pure deletions in counterfactual edits.
pub const DELETION_SENTINEL: &str = "DELETION*";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("position {index} out of bounds for sequence of length {len}")]
    OutOfBounds { index: usize, len: usize },
}

/// Split text into whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// An ordered list of whitespace tokens.
///
/// Joining with single spaces and re-tokenizing yields the same words.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WordSequence {
    words: Vec<String>,
}

impl WordSequence {
    pub fn from_text(text: &str) -> Self {
        Self { words: tokenize(text) }
    }

    /// Builds a sequence from tokens, re-splitting any token that carries
    /// whitespace and dropping empty ones so the canonical form holds.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            words: words.into_iter().flat_map(|w| tokenize(w.as_ref())).collect(),
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }

    /// Single-space join.
    pub fn to_text(&self) -> String {
        self.words.join(" ")
    }
}

impl fmt::Display for WordSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// True when the token is a redaction slot, allowing punctuation glued to the
/// outside of the brackets (`"[REDACTED]."`).
pub fn is_redaction_slot(token: &str) -> bool {
    match token.find(REDACTED) {
        Some(start) => {
            let (before, rest) = token.split_at(start);
            let after = &rest[REDACTED.len()..];
            before.chars().chain(after.chars()).all(|c| !c.is_alphanumeric())
        }
        None => false,
    }
}

/// Replace the words at `positions` with [`REDACTED`].
pub fn redact(seq: &WordSequence, positions: &BTreeSet<usize>) -> Result<WordSequence, TextError> {
    if let Some(&index) = positions.iter().find(|&&i| i >= seq.len()) {
        return Err(TextError::OutOfBounds { index, len: seq.len() });
    }
    let words = seq
        .words
        .iter()
        .enumerate()
        .map(|(i, w)| {
            if positions.contains(&i) {
                REDACTED.to_owned()
            } else {
                w.clone()
            }
        })
        .collect();
    Ok(WordSequence { words })
}

/// Lowercased word with leading and trailing non-alphanumeric characters
/// removed. Internal apostrophes and hyphens survive.
pub fn match_key(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// All indices whose token matches `target` under [`match_key`].
pub fn find_word_positions(seq: &WordSequence, target: &str) -> Vec<usize> {
    let key = match_key(target);
    if key.is_empty() {
        return Vec::new();
    }
    seq.words
        .iter()
        .enumerate()
        .filter(|(_, w)| match_key(w) == key)
        .map(|(i, _)| i)
        .collect()
}

/// Occurrences of `phrase` as a run of whole words in
/// `seq`, compared under [`match_key`].
pub fn count_phrase(seq: &WordSequence, phrase: &str) -> usize {
    let target: Vec<String> = tokenize(phrase).iter().map(|w| match_key(w)).collect();
    if target.is_empty() || target.iter().any(String::is_empty) {
        return 0;
    }
    let keys: Vec<String> = seq.words.iter().map(|w| match_key(w)).collect();
    keys.windows(target.len()).filter(|w| *w == target.as_slice()).count()
}

/// The units an explanation contributes to a frequency table.
#[derive(Debug, Clone, PartialEq)]
pub enum CountedExplanation {
    /// Attribution: the listed words.
    Listed(Vec<String>),
    /// Redaction: the original words sitting under redaction slots.
    Redacted {
        original: WordSequence,
        redacted: WordSequence,
    },
    /// Counterfactual: words inserted or substituted; deletions count as
    /// [`DELETION_SENTINEL`].
    Edited {
        original: WordSequence,
        edited: WordSequence,
    },
}

impl CountedExplanation {
    fn units(&self) -> Vec<String> {
        match self {
            CountedExplanation::Listed(words) => words.iter().map(|w| lemmatize(w)).collect(),
            CountedExplanation::Redacted { original, redacted } => {
                if original.len() != redacted.len() {
                    return Vec::new();
                }
                original
                    .words()
                    .iter()
                    .zip(redacted.words())
                    .filter(|(_, r)| is_redaction_slot(r))
                    .map(|(o, _)| lemmatize(o))
                    .collect()
            }
            CountedExplanation::Edited { original, edited } => {
                let script = word_edit_distance(original, edited);
                script
                    .operations
                    .iter()
                    .map(|op| match op {
                        EditOp::Insert { word, .. } | EditOp::Substitute { word, .. } => lemmatize(word),
                        EditOp::Delete { .. } => DELETION_SENTINEL.to_owned(),
                    })
                    .collect()
            }
        }
    }
}

/// Top-`k` lemmas by count, descending, ties broken by lemma order.
pub fn top_frequent_words(explanations: &[CountedExplanation], k: usize) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for unit in explanations.iter().flat_map(CountedExplanation::units) {
        if unit.is_empty() {
            continue;
        }
        *counts.entry(unit).or_default() += 1;
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}
