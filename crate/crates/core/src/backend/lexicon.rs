//! Deterministic bag-of-words classifier posing as a chat model.
//!
//! `p(y|x) = softmax_y(bias_y + sum_{w in x} weight_{w,y})`, where words are
//! compared by [`match_key`] and `[REDACTED]` tokens contribute nothing.
//!
//! The model reads the text under classification from the first user turn:
//! the first paragraph, minus a leading `Field:` header such as `Text:`.
//! Explanation requests are recognized by the instruction verb after
//! `Question:` (List, Redact/Replace, Edit), fill requests by a trailing
//! `Output word:` line.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    argmax_first, softmax, BackendError, BackendIdentity, Capabilities, Classification, GenerationRequest,
    GenerationResponse, ModelBackend,
};
use crate::prompts::{ChatTranscript, Speaker};
use crate::textops::{is_redaction_slot, match_key, WordSequence, REDACTED};

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("cannot read lexicon {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("lexicon line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("lexicon declares no labels")]
    NoLabels,
}

/// How the model answers self-explanation requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExplanationPolicy {
    /// Point at the word with the largest weight margin for the model's own
    /// prediction (earliest on ties).
    FaithfulArgmax,
    /// Always point at this word.
    FixedWord { word: String },
    /// Decline every explanation request.
    Refuse,
    /// Answer outside the requested format.
    FormatViolator,
    /// Like `FaithfulArgmax`, but with probability `rate` point at a
    /// different word instead. The choice is a pure function of the input
    /// text and `seed`.
    Noisy { rate: f64, seed: u64 },
}

/// How the model answers counterfactual fill prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FillPolicy {
    /// The configured fill word for the target label, else the lexicon word
    /// with the largest margin toward it.
    Lexicon,
    /// Echo the target label.
    EchoLabel,
    /// Return this text verbatim.
    Fixed { text: String },
}

pub const REFUSAL: &str = "I cannot determine that.";
pub const FORMAT_VIOLATION: &str = "hate and early";

#[derive(Debug, Clone, PartialEq)]
pub struct LexiconModel {
    labels: Vec<String>,
    bias: Vec<f64>,
    weights: BTreeMap<String, Vec<f64>>,
    fill_words: BTreeMap<String, String>,
    policy: ExplanationPolicy,
    fill_policy: FillPolicy,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum LexiconRecord {
    Word {
        word: String,
        weights: serde_json::Map<String, serde_json::Value>,
    },
    Bias {
        bias: serde_json::Map<String, serde_json::Value>,
        #[serde(default)]
        labels: Option<Vec<String>>,
    },
    Fill {
        fill: BTreeMap<String, String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Request {
    Classification,
    Fill,
    Explanation { kind: Kind, multi: bool },
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Attribution,
    Redaction,
    Counterfactual,
}

impl LexiconModel {
    pub fn new<S: AsRef<str>>(labels: &[S]) -> Self {
        Self {
            labels: labels.iter().map(|l| l.as_ref().to_owned()).collect(),
            bias: vec![0.0; labels.len()],
            weights: BTreeMap::new(),
            fill_words: BTreeMap::new(),
            policy: ExplanationPolicy::FaithfulArgmax,
            fill_policy: FillPolicy::Lexicon,
        }
    }

    fn label_pos(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn with_bias(mut self, label: &str, value: f64) -> Self {
        if let Some(i) = self.label_pos(label) {
            self.bias[i] = value;
        }
        self
    }

    /// Set a word's weights. Labels not mentioned weigh zero; unknown labels
    /// are ignored.
    pub fn with_word(mut self, word: &str, weights: &[(&str, f64)]) -> Self {
        let mut row = vec![0.0; self.labels.len()];
        for (label, w) in weights {
            if let Some(i) = self.label_pos(label) {
                row[i] = *w;
            }
        }
        self.weights.insert(match_key(word), row);
        self
    }

    pub fn with_fill_word(mut self, label: &str, word: &str) -> Self {
        self.fill_words.insert(label.to_owned(), word.to_owned());
        self
    }

    pub fn with_policy(mut self, policy: ExplanationPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_fill_policy(mut self, policy: FillPolicy) -> Self {
        self.fill_policy = policy;
        self
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn policy(&self) -> &ExplanationPolicy {
        &self.policy
    }

    /// Parse the jsonl lexicon format: `{word, weights}` records, one
    /// `{bias, labels?}` record and optional `{fill}` records.
    pub fn from_jsonl_str(text: &str) -> Result<Self, LexiconError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: LexiconRecord = serde_json::from_str(line).map_err(|e| LexiconError::Line {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push((i + 1, rec));
        }

        let mut labels: Vec<String> = Vec::new();
        let note = |name: &str, labels: &mut Vec<String>| {
            if !labels.iter().any(|l| l == name) {
                labels.push(name.to_owned());
            }
        };
        for (_, rec) in &records {
            if let LexiconRecord::Bias { bias, labels: declared } = rec {
                if let Some(declared) = declared {
                    for l in declared {
                        note(l, &mut labels);
                    }
                }
                for l in bias.keys() {
                    note(l, &mut labels);
                }
            }
        }
        for (_, rec) in &records {
            if let LexiconRecord::Word { weights, .. } = rec {
                for l in weights.keys() {
                    note(l, &mut labels);
                }
            }
        }
        if labels.is_empty() {
            return Err(LexiconError::NoLabels);
        }

        let number = |line: usize, v: &serde_json::Value| {
            v.as_f64().ok_or_else(|| LexiconError::Line {
                line,
                message: format!("weight {v} is not a number"),
            })
        };
        let mut model = LexiconModel::new(&labels);
        for (line, rec) in records {
            match rec {
                LexiconRecord::Bias { bias, .. } => {
                    for (label, v) in &bias {
                        let value = number(line, v)?;
                        model = model.with_bias(label, value);
                    }
                }
                LexiconRecord::Word { word, weights } => {
                    let key = match_key(&word);
                    if key.is_empty() {
                        return Err(LexiconError::Line {
                            line,
                            message: format!("word {word:?} is empty after normalization"),
                        });
                    }
                    if model.weights.contains_key(&key) {
                        return Err(LexiconError::Line {
                            line,
                            message: format!("duplicate word {word:?}"),
                        });
                    }
                    let pairs = weights
                        .iter()
                        .map(|(l, v)| Ok((l.as_str(), number(line, v)?)))
                        .collect::<Result<Vec<_>, LexiconError>>()?;
                    model = model.with_word(&word, &pairs);
                }
                LexiconRecord::Fill { fill } => {
                    for (label, word) in fill {
                        model = model.with_fill_word(&label, &word);
                    }
                }
            }
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let text = fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_jsonl_str(&text)
    }

    fn weight_row(&self, word: &str) -> Option<&[f64]> {
        if is_redaction_slot(word) {
            return None;
        }
        self.weights.get(&match_key(word)).map(Vec::as_slice)
    }

    /// Logits over the model's own labels.
    /// Summed per distinct word in key order, so inputs that are equal as
    /// multisets get bit-identical logits.
    pub fn logits(&self, words: &WordSequence) -> Vec<f64> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for w in words.words().iter().filter(|w| !is_redaction_slot(w)) {
            *counts.entry(match_key(w)).or_default() += 1;
        }
        let mut logits = self.bias.clone();
        for (key, count) in counts {
            if let Some(row) = self.weights.get(&key) {
                for (l, v) in logits.iter_mut().zip(row) {
                    *l += v * count as f64;
                }
            }
        }
        logits
    }

    /// Distribution over arbitrary label names; unknown labels get zero
    /// bias and weights.
    pub fn distribution(&self, words: &WordSequence, labels: &[String]) -> Vec<f64> {
        let own = self.logits(words);
        let logits: Vec<f64> = labels
            .iter()
            .map(|l| self.label_pos(l).map_or(0.0, |i| own[i]))
            .collect();
        softmax(&logits)
    }

    fn margin(&self, word: &str, label: usize) -> f64 {
        let row = match self.weight_row(word) {
            Some(row) => row,
            None => return 0.0,
        };
        let rival = row
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != label)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if rival.is_finite() {
            row[label] - rival
        } else {
            row[label]
        }
    }

    /// Position with the largest margin toward `label`, earliest on ties.
    pub fn strongest_position(&self, words: &WordSequence, label: usize) -> Option<usize> {
        if words.is_empty() {
            return None;
        }
        let margins: Vec<f64> = words.words().iter().map(|w| self.margin(w, label)).collect();
        Some(argmax_first(&margins))
    }

    /// Fill word steering toward `label`.
    pub fn fill_word_for(&self, label: &str) -> Option<String> {
        if let Some(w) = self.fill_words.get(label) {
            return Some(w.clone());
        }
        let idx = self.label_pos(label)?;
        let mut best: Option<(&String, f64)> = None;
        for (word, row) in &self.weights {
            let m = self.margin_row(row, idx);
            if m > 0.0 && best.is_none_or(|(_, b)| m > b) {
                best = Some((word, m));
            }
        }
        best.map(|(w, _)| w.clone())
    }

    fn margin_row(&self, row: &[f64], label: usize) -> f64 {
        let rival = row
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != label)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        row[label] - if rival.is_finite() { rival } else { 0.0 }
    }

    fn predicted(&self, words: &WordSequence) -> usize {
        argmax_first(&softmax(&self.logits(words)))
    }

    fn second(&self, words: &WordSequence) -> Option<usize> {
        let p = softmax(&self.logits(words));
        let first = argmax_first(&p);
        (0..p.len())
            .filter(|&i| i != first)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if p[b] >= p[i] => Some(b),
                _ => Some(i),
            })
    }

    fn respond(&self, transcript: &ChatTranscript) -> String {
        let turns = transcript.turns();
        let last = turns.last().map(|t| t.text.as_str()).unwrap_or_default();
        match classify_request(last, turns.len()) {
            Request::Fill => self.respond_fill(last),
            Request::Classification => {
                let x = extract_input(transcript);
                self.labels[self.predicted(&x)].clone()
            }
            Request::Explanation { kind, multi } => self.respond_explanation(transcript, kind, multi),
            Request::Unknown => REFUSAL.to_owned(),
        }
    }

    fn respond_fill(&self, prompt: &str) -> String {
        let target = prompt
            .lines()
            .find_map(|l| l.trim().strip_prefix("Target label:"))
            .map(str::trim)
            .unwrap_or_default();
        match &self.fill_policy {
            FillPolicy::Lexicon => self.fill_word_for(target).unwrap_or_default(),
            FillPolicy::EchoLabel => target.to_owned(),
            FillPolicy::Fixed { text } => text.clone(),
        }
    }

    fn respond_explanation(&self, transcript: &ChatTranscript, kind: Kind, multi: bool) -> String {
        let x = extract_input(transcript);
        let own = transcript
            .turns()
            .iter()
            .find(|t| t.speaker == Speaker::Assistant)
            .and_then(|t| self.label_pos(t.text.trim()))
            .unwrap_or_else(|| self.predicted(&x));

        let chosen: Vec<usize> = match &self.policy {
            ExplanationPolicy::Refuse => return REFUSAL.to_owned(),
            ExplanationPolicy::FormatViolator => return FORMAT_VIOLATION.to_owned(),
            ExplanationPolicy::FixedWord { word } => {
                return self.render_fixed(&x, kind, multi, word);
            }
            ExplanationPolicy::FaithfulArgmax => {
                let Some(star) = self.strongest_position(&x, own) else {
                    return REFUSAL.to_owned();
                };
                if multi {
                    let mut supportive: Vec<usize> = (0..x.len())
                        .filter(|&i| self.margin(&x.words()[i], own) > 0.0)
                        .collect();
                    if supportive.is_empty() {
                        supportive.push(star);
                    }
                    supportive
                } else {
                    vec![star]
                }
            }
            ExplanationPolicy::Noisy { rate, seed } => {
                let Some(star) = self.strongest_position(&x, own) else {
                    return REFUSAL.to_owned();
                };
                vec![noisy_position(&x, star, *rate, *seed)]
            }
        };
        self.render_choice(&x, kind, multi, &chosen)
    }

    fn render_choice(&self, x: &WordSequence, kind: Kind, multi: bool, chosen: &[usize]) -> String {
        match kind {
            Kind::Attribution => {
                let mut listed: Vec<&str> = Vec::new();
                for &i in chosen {
                    let w = x.words()[i].as_str();
                    if !listed.iter().any(|l| match_key(l) == match_key(w)) {
                        listed.push(w);
                    }
                }
                let listed: Vec<String> = listed
                    .iter()
                    .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_owned())
                    .collect();
                if multi {
                    serde_json::json!({ "words": listed }).to_string()
                } else {
                    format!("Answer: {}", listed[0])
                }
            }
            Kind::Redaction => {
                let words: Vec<String> = x
                    .words()
                    .iter()
                    .enumerate()
                    .map(|(i, w)| {
                        if chosen.contains(&i) {
                            REDACTED.to_owned()
                        } else {
                            w.clone()
                        }
                    })
                    .collect();
                let text = words.join(" ");
                if multi {
                    serde_json::json!({ "redacted_text": text }).to_string()
                } else {
                    format!("Answer: {text}")
                }
            }
            Kind::Counterfactual => {
                let target = self.second(x).map(|i| self.labels[i].clone());
                let fill = target.and_then(|t| self.fill_word_for(&t));
                let at = chosen[0];
                let mut words: Vec<String> = x.words().to_vec();
                match fill {
                    Some(f) => words[at] = f,
                    None => {
                        words.remove(at);
                    }
                }
                let text = words.join(" ");
                if multi {
                    serde_json::json!({ "edited_text": text }).to_string()
                } else {
                    format!("Answer: {text}")
                }
            }
        }
    }

    fn render_fixed(&self, x: &WordSequence, kind: Kind, multi: bool, word: &str) -> String {
        let text = match kind {
            Kind::Attribution => {
                return if multi {
                    serde_json::json!({ "words": [word] }).to_string()
                } else {
                    format!("Answer: {word}")
                };
            }
            Kind::Redaction => x
                .words()
                .iter()
                .map(|w| {
                    if match_key(w) == match_key(word) {
                        REDACTED
                    } else {
                        w.as_str()
                    }
                })
                .collect::<Vec<_>>()
                .join(" "),
            Kind::Counterfactual => format!("{word} {x}"),
        };
        let field = if kind == Kind::Redaction {
            "redacted_text"
        } else {
            "edited_text"
        };
        if multi {
            serde_json::json!({ field: text }).to_string()
        } else {
            format!("Answer: {text}")
        }
    }
}

/// With probability `rate`, replace `star` by a uniformly chosen position
/// holding a different word.
fn noisy_position(x: &WordSequence, star: usize, rate: f64, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(x.to_text().as_bytes()));
    let corrupt = rng.random::<f64>() < rate;
    if !corrupt {
        return star;
    }
    let key = match_key(&x.words()[star]);
    let others: Vec<usize> = (0..x.len()).filter(|&i| match_key(&x.words()[i]) != key).collect();
    if others.is_empty() {
        star
    } else {
        others[rng.random_range(0..others.len())]
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn classify_request(last: &str, turns: usize) -> Request {
    let trimmed = last.trim_end();
    if trimmed.ends_with("Output word:") {
        return Request::Fill;
    }
    if turns == 1 {
        return Request::Classification;
    }
    let instruction = trimmed.trim_start();
    let instruction = instruction
        .strip_prefix("Question:")
        .unwrap_or(instruction)
        .trim_start();
    let multi = instruction.contains("JSON");
    let kind = match instruction.split_whitespace().next() {
        Some("List") => Kind::Attribution,
        Some("Redact") | Some("Replace") => Kind::Redaction,
        Some("Edit") => Kind::Counterfactual,
        _ => return Request::Unknown,
    };
    Request::Explanation { kind, multi }
}

/// The text under classification: first paragraph of the first user turn
/// with any leading `Field:` header removed.
fn extract_input(transcript: &ChatTranscript) -> WordSequence {
    let first = transcript.turns().first().map(|t| t.text.as_str()).unwrap_or_default();
    let paragraph = first.split("\n\n").next().unwrap_or_default();
    let mut words = WordSequence::from_text(paragraph).words().to_vec();
    if words.first().is_some_and(|w| w.len() > 1 && w.ends_with(':')) {
        words.remove(0);
    }
    WordSequence::from_words(words)
}

impl ModelBackend for LexiconModel {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            backend: "lexicon".into(),
            model: format!("lexicon-{}w-{}l", self.weights.len(), self.labels.len()),
        }
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_label_distribution: true,
            deterministic: true,
        }
    }

    fn classify(&self, transcript: &ChatTranscript, labels: &[String]) -> Result<Classification, BackendError> {
        let x = extract_input(transcript);
        let probabilities = self.distribution(&x, labels);
        Ok(Classification::from_probabilities(
            labels.to_vec(),
            probabilities,
            false,
        ))
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        Ok(GenerationResponse {
            text: self.respond(&request.transcript),
            label_log_scores: None,
        })
    }
}
