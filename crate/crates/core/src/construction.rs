//! Erasure influence and pseudo self-explanation construction.
//!
//! The influence of the word at position `i` is the drop in the predicted
//! label's probability when that single position is replaced by
//! `[REDACTED]`. The most influential word `w*` seeds one pseudo
//! explanation per style.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{self, argmax_first, BackendError, GenerationRequest, ModelBackend};
use crate::corpus::{LabeledInstance, TaskSpec};
use crate::parallel::map_bounded;
use crate::prompts::{Bindings, ExplanationStyle, Placeholder, PromptError, PromptRegistry, Style, WordMode};
use crate::textops::{count_phrase, match_key, redact, TextError, WordSequence, REDACTED};

#[derive(Debug, Error)]
pub enum ConstructionError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("instance {0} has an empty input")]
    EmptyInput(String),
    #[error("need at least two labels, got {0}")]
    TooFewLabels(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceScore {
    pub index: usize,
    pub word: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub id: String,
    pub labels: Vec<String>,
    /// Label distribution on the unedited input.
    pub distribution: Vec<f64>,
    pub y_hat: String,
    pub p_yhat: f64,
    /// `p(y_hat | x with position i redacted)` for each position.
    pub erased_p: Vec<f64>,
    pub scores: Vec<InfluenceScore>,
    pub w_star_index: usize,
    pub w_star: String,
    /// Set when the backend only returned one-hot predictions, so scores
    /// are flip indicators rather than probability drops.
    pub degraded: bool,
}

/// Position-wise erasure influence for one instance: one classification of
/// the input followed by one per word, `m + 1` calls in total.
pub fn influence_all<B: ModelBackend + ?Sized>(
    backend: &B,
    prompts: &PromptRegistry,
    task: &TaskSpec,
    instance: &LabeledInstance,
    concurrency: usize,
) -> Result<AttributionResult, ConstructionError> {
    let x = instance.words();
    if x.is_empty() {
        return Err(ConstructionError::EmptyInput(instance.id.clone()));
    }
    let labels = &task.label_names;
    let second = instance.second_input.as_deref();

    let base_prompt = prompts.classification_prompt(task, &x.to_text(), second)?;
    let base = backend::classify(backend, &base_prompt, labels)?;
    let y = base.predicted;

    let erased: Vec<Result<(f64, bool), ConstructionError>> = map_bounded(x.words(), concurrency, |i, _| {
        let probe = redact(&x, &BTreeSet::from([i]))?;
        let prompt = prompts.classification_prompt(task, &probe.to_text(), second)?;
        let c = backend::classify(backend, &prompt, labels)?;
        Ok((c.probabilities[y], c.one_hot))
    });
    let erased = erased.into_iter().collect::<Result<Vec<_>, _>>()?;

    let p_yhat = base.probabilities[y];
    let scores: Vec<InfluenceScore> = x
        .words()
        .iter()
        .zip(&erased)
        .enumerate()
        .map(|(index, (word, (p, _)))| InfluenceScore {
            index,
            word: word.clone(),
            score: p_yhat - p,
        })
        .collect();
    let raw: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let w_star_index = argmax_first(&raw);
    Ok(AttributionResult {
        id: instance.id.clone(),
        labels: labels.clone(),
        distribution: base.probabilities.clone(),
        y_hat: labels[y].clone(),
        p_yhat,
        erased_p: erased.iter().map(|(p, _)| *p).collect(),
        w_star: x.words()[w_star_index].clone(),
        w_star_index,
        scores,
        degraded: base.one_hot || erased.iter().any(|(_, one_hot)| *one_hot),
    })
}

/// Index of the second most probable label; ties go to the earlier label.
pub fn second_label(distribution: &[f64]) -> Result<usize, ConstructionError> {
    if distribution.len() < 2 {
        return Err(ConstructionError::TooFewLabels(distribution.len()));
    }
    let mut order: Vec<usize> = (0..distribution.len()).collect();
    order.sort_by(|&a, &b| distribution[b].total_cmp(&distribution[a]));
    Ok(order[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillRejection {
    LabelLeak,
    RedactionToken,
    NotOneWord,
    Unchanged,
    Unparseable,
}

impl FillRejection {
    pub fn as_str(self) -> &'static str {
        match self {
            FillRejection::LabelLeak => "label_leak",
            FillRejection::RedactionToken => "redaction_token",
            FillRejection::NotOneWord => "not_one_word",
            FillRejection::Unchanged => "unchanged",
            FillRejection::Unparseable => "unparseable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualFill {
    pub bar_y: String,
    /// The completion as returned, untrimmed.
    pub raw_fill: String,
    pub fill_word: String,
    pub filled_text: Option<String>,
    pub accepted: bool,
    pub rejection: Option<FillRejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoExplanation {
    pub id: String,
    pub style: ExplanationStyle,
    pub payload: String,
    pub w_star_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fill: Option<CounterfactualFill>,
}

pub fn build_pseudo_attribution(result: &AttributionResult) -> PseudoExplanation {
    PseudoExplanation {
        id: result.id.clone(),
        style: ExplanationStyle::Attribution,
        payload: result.w_star.clone(),
        w_star_index: result.w_star_index,
        fill: None,
    }
}

pub fn build_pseudo_redaction(
    result: &AttributionResult,
    x: &WordSequence,
) -> Result<PseudoExplanation, ConstructionError> {
    let redacted = redact(x, &BTreeSet::from([result.w_star_index]))?;
    Ok(PseudoExplanation {
        id: result.id.clone(),
        style: ExplanationStyle::Redaction,
        payload: redacted.to_text(),
        w_star_index: result.w_star_index,
        fill: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum PseudoOutcome {
    Accepted(PseudoExplanation),
    Rejected(CounterfactualFill),
}

impl PseudoOutcome {
    pub fn fill(&self) -> Option<&CounterfactualFill> {
        match self {
            PseudoOutcome::Accepted(p) => p.fill.as_ref(),
            PseudoOutcome::Rejected(f) => Some(f),
        }
    }

    pub fn accepted(&self) -> Option<&PseudoExplanation> {
        match self {
            PseudoOutcome::Accepted(p) => Some(p),
            PseudoOutcome::Rejected(_) => None,
        }
    }

    pub fn rejection(&self) -> Option<FillRejection> {
        self.fill().and_then(|f| f.rejection)
    }
}

/// Strip whitespace, surrounding quotes and trailing sentence punctuation.
fn clean_fill(raw: &str) -> String {
    let mut s = raw.trim();
    if let Some((_, rest)) = s.rsplit_once("Answer:") {
        s = rest.trim();
    }
    let quote = |c: char| matches!(c, '"' | '\'' | '`' | '\u{201c}' | '\u{201d}');
    s.trim_start_matches(quote)
        .trim_end_matches(|c: char| quote(c) || matches!(c, '.' | ',' | '!' | '?' | ';' | ':'))
        .trim()
        .to_owned()
}

fn fill_verdict(fill: &str, original: &str, task: &TaskSpec) -> Option<FillRejection> {
    if fill.is_empty() {
        return Some(FillRejection::Unparseable);
    }
    if fill.contains(REDACTED) {
        return Some(FillRejection::RedactionToken);
    }
    let seq = WordSequence::from_text(fill);
    let leaks = task
        .label_surface_forms()
        .iter()
        .any(|form| form.chars().any(char::is_alphabetic) && count_phrase(&seq, form) > 0);
    if leaks {
        return Some(FillRejection::LabelLeak);
    }
    if seq.len() != 1 {
        return Some(FillRejection::NotOneWord);
    }
    if match_key(fill) == match_key(original) {
        return Some(FillRejection::Unchanged);
    }
    None
}

/// Replace the token at `index`, keeping any punctuation glued to it.
fn substitute_word(x: &WordSequence, index: usize, fill: &str) -> WordSequence {
    let mut words = x.words().to_vec();
    let token = &words[index];
    let start = token.find(char::is_alphanumeric).unwrap_or(token.len());
    let end = token
        .rfind(char::is_alphanumeric)
        .map_or(start, |i| i + token[i..].chars().next().map_or(1, char::len_utf8));
    let replaced = if start < end {
        format!("{}{}{}", &token[..start], fill, &token[end..])
    } else {
        fill.to_owned()
    };
    words[index] = replaced;
    WordSequence::from_words(words)
}

/// Ask the model for a word steering the input toward the second most
/// probable label and splice it in at `w*`. An empty completion is retried
/// once; other filter failures are final.
pub fn build_pseudo_counterfactual<B: ModelBackend + ?Sized>(
    backend: &B,
    prompts: &PromptRegistry,
    task: &TaskSpec,
    instance: &LabeledInstance,
    result: &AttributionResult,
) -> Result<PseudoOutcome, ConstructionError> {
    let x = instance.words();
    let bar_y = result.labels[second_label(&result.distribution)?].clone();
    let redacted = redact(&x, &BTreeSet::from([result.w_star_index]))?;
    let prompt = prompts
        .get(&task.task_id, Style::CfFill, WordMode::NotApplicable)?
        .render(
            &Bindings::new()
                .with(Placeholder::RedactedInput, redacted.to_text())
                .with(Placeholder::TargetLabel, bar_y.clone())
                .second_input(instance.second_input.as_deref()),
        )?;
    let request = GenerationRequest::new(prompt);

    let mut raw = backend.generate(&request)?.text;
    if clean_fill(&raw).is_empty() {
        raw = backend.generate(&request)?.text;
    }
    let fill_word = clean_fill(&raw);
    let original = &x.words()[result.w_star_index];
    let rejection = fill_verdict(&fill_word, original, task);
    let filled_text = rejection
        .is_none()
        .then(|| substitute_word(&x, result.w_star_index, &fill_word).to_text());
    let fill = CounterfactualFill {
        bar_y,
        raw_fill: raw,
        fill_word,
        accepted: rejection.is_none(),
        filled_text: filled_text.clone(),
        rejection,
    };
    Ok(match filled_text {
        Some(text) => PseudoOutcome::Accepted(PseudoExplanation {
            id: result.id.clone(),
            style: ExplanationStyle::Counterfactual,
            payload: text,
            w_star_index: result.w_star_index,
            fill: Some(fill),
        }),
        None => PseudoOutcome::Rejected(fill),
    })
}

/// Build the pseudo explanation of one style from an attribution result.
pub fn build_pseudo<B: ModelBackend + ?Sized>(
    backend: &B,
    prompts: &PromptRegistry,
    task: &TaskSpec,
    instance: &LabeledInstance,
    result: &AttributionResult,
    style: ExplanationStyle,
) -> Result<PseudoOutcome, ConstructionError> {
    match style {
        ExplanationStyle::Attribution => Ok(PseudoOutcome::Accepted(build_pseudo_attribution(result))),
        ExplanationStyle::Redaction => Ok(PseudoOutcome::Accepted(build_pseudo_redaction(
            result,
            &instance.words(),
        )?)),
        ExplanationStyle::Counterfactual => build_pseudo_counterfactual(backend, prompts, task, instance, result),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub index: usize,
    pub word: String,
    pub score: f64,
}

/// One line of the attribution log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionLogRecord {
    pub id: String,
    pub y_hat: String,
    pub p_yhat: f64,
    pub scores: Vec<ScoreRecord>,
    pub w_star_index: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl AttributionLogRecord {
    pub fn new(result: &AttributionResult, rejection: Option<FillRejection>) -> Self {
        Self {
            id: result.id.clone(),
            y_hat: result.y_hat.clone(),
            p_yhat: result.p_yhat,
            scores: result
                .scores
                .iter()
                .map(|s| ScoreRecord {
                    index: s.index,
                    word: s.word.clone(),
                    score: s.score,
                })
                .collect(),
            w_star_index: result.w_star_index,
            degraded: result.degraded,
            rejected: rejection.map(|_| true),
            reason: rejection.map(|r| r.as_str().to_owned()),
        }
    }
}
