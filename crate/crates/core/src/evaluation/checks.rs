//! Parsing self-explanations and checking them against their input.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::EvalError;
use crate::corpus::TaskSpec;
use crate::prompts::{ExplanationStyle, WordMode};
use crate::textops::{
    count_phrase, find_word_positions, is_redaction_slot, redact, word_edit_distance, WordSequence, REDACTED,
};

/// The shape-checked content of an explanation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Parsed {
    Words(Vec<String>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfExplanation {
    pub style: ExplanationStyle,
    pub word_mode: WordMode,
    pub raw_text: String,
    pub parsed: Option<Parsed>,
    pub parse_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
}

fn strip_quotes(s: &str) -> &str {
    let s = s.trim();
    for (open, close) in [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}'), ('`', '`')] {
        if s.len() >= 2 && s.starts_with(open) && s.ends_with(close) {
            return s[open.len_utf8()..s.len() - close.len_utf8()].trim();
        }
    }
    s
}

/// Text after the last `Answer:` marker, quotes stripped.
fn after_marker(raw: &str) -> Option<&str> {
    let (_, rest) = raw.rsplit_once("Answer:")?;
    let rest = strip_quotes(rest);
    (!rest.is_empty()).then_some(rest)
}

/// The outermost JSON object embedded in `raw`.
fn json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    if end < start {
        return None;
    }
    match serde_json::from_str::<Value>(&raw[start..=end]).ok()? {
        Value::Object(map) => Some(map),
        _ => None,
    }
}

fn json_text(raw: &str, key: &str) -> Option<String> {
    let obj = json_object(raw)?;
    let text = strip_quotes(obj.get(key)?.as_str()?);
    (!text.is_empty()).then(|| text.to_owned())
}

fn clean_listed(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric() && c != '[' && c != ']')
        .to_owned()
}

impl SelfExplanation {
    fn ok(style: ExplanationStyle, word_mode: WordMode, raw: &str, parsed: Parsed) -> Self {
        Self {
            style,
            word_mode,
            raw_text: raw.to_owned(),
            parsed: Some(parsed),
            parse_ok: true,
            parse_error: None,
        }
    }

    fn failed(style: ExplanationStyle, word_mode: WordMode, raw: &str, why: &str) -> Self {
        Self {
            style,
            word_mode,
            raw_text: raw.to_owned(),
            parsed: None,
            parse_ok: false,
            parse_error: Some(why.to_owned()),
        }
    }

    pub fn words(&self) -> Option<&[String]> {
        match &self.parsed {
            Some(Parsed::Words(w)) => Some(w),
            _ => None,
        }
    }

    pub fn text(&self) -> Option<&str> {
        match &self.parsed {
            Some(Parsed::Text(t)) => Some(t),
            _ => None,
        }
    }
}

/// Read an explanation out of a raw completion.
///
/// One-word attributions need an `Answer:` marker; multi-word attributions
/// a JSON object with a `words` array. Redactions and counterfactuals accept
/// either their JSON field or an `Answer:` marker, preferring the format the
/// word mode asks for.
pub fn parse_explanation(raw: &str, style: ExplanationStyle, word_mode: WordMode) -> SelfExplanation {
    let multi = word_mode == WordMode::MultiWord;
    match style {
        ExplanationStyle::Attribution if multi => {
            let Some(obj) = json_object(raw) else {
                return SelfExplanation::failed(style, word_mode, raw, "no JSON object");
            };
            let Some(Value::Array(items)) = obj.get("words") else {
                return SelfExplanation::failed(style, word_mode, raw, "no \"words\" array");
            };
            let mut words = Vec::new();
            for item in items {
                let Some(w) = item.as_str() else {
                    return SelfExplanation::failed(style, word_mode, raw, "non-string entry in \"words\"");
                };
                let w = clean_listed(w);
                if !w.is_empty() {
                    words.push(w);
                }
            }
            SelfExplanation::ok(style, word_mode, raw, Parsed::Words(words))
        }
        ExplanationStyle::Attribution => match after_marker(raw) {
            Some(rest) => {
                let words: Vec<String> = rest
                    .split_whitespace()
                    .map(clean_listed)
                    .filter(|w| !w.is_empty())
                    .collect();
                if words.is_empty() {
                    SelfExplanation::failed(style, word_mode, raw, "empty answer")
                } else {
                    SelfExplanation::ok(style, word_mode, raw, Parsed::Words(words))
                }
            }
            None => SelfExplanation::failed(style, word_mode, raw, "no \"Answer:\" marker"),
        },
        ExplanationStyle::Redaction | ExplanationStyle::Counterfactual => {
            let key = if style == ExplanationStyle::Redaction {
                "redacted_text"
            } else {
                "edited_text"
            };
            let from_json = || json_text(raw, key);
            let from_marker = || after_marker(raw).map(str::to_owned);
            let found = if multi {
                from_json().or_else(from_marker)
            } else {
                from_marker().or_else(from_json)
            };
            match found {
                Some(text) => SelfExplanation::ok(style, word_mode, raw, Parsed::Text(text)),
                None => SelfExplanation::failed(
                    style,
                    word_mode,
                    raw,
                    &format!("no \"Answer:\" marker or \"{key}\" field"),
                ),
            }
        }
    }
}

/// Why an explanation breaks its style condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StyleViolation {
    Unparseable { detail: String },
    EmptyList,
    WordNotInInput { word: String },
    LengthMismatch { input: usize, explanation: usize },
    AlteredWord { position: usize },
    NoRedaction,
    RedactionToken,
    LabelName { label: String },
    Unchanged,
}

impl fmt::Display for StyleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StyleViolation::Unparseable { detail } => write!(f, "unparseable: {detail}"),
            StyleViolation::EmptyList => write!(f, "empty_list"),
            StyleViolation::WordNotInInput { word } => write!(f, "word_not_in_input: {word}"),
            StyleViolation::LengthMismatch { input, explanation } => {
                write!(f, "length_mismatch: input {input} words, explanation {explanation}")
            }
            StyleViolation::AlteredWord { position } => write!(f, "altered_word: position {position}"),
            StyleViolation::NoRedaction => write!(f, "no_redaction"),
            StyleViolation::RedactionToken => write!(f, "redaction_token"),
            StyleViolation::LabelName { label } => write!(f, "label_name: {label}"),
            StyleViolation::Unchanged => write!(f, "unchanged"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub style_ok: bool,
    pub violation: Option<StyleViolation>,
    pub n_observed: usize,
    /// `None` means any count is accepted.
    pub n_required: Option<usize>,
    pub retained: bool,
}

impl ConditionCheck {
    pub fn n_ok(&self) -> bool {
        self.n_required.is_none_or(|n| n == self.n_observed)
    }

    /// Short reason for exclusion, if any.
    pub fn reason(&self) -> Option<String> {
        if let Some(v) = &self.violation {
            return Some(v.to_string());
        }
        match self.n_required {
            Some(n) if n != self.n_observed => Some(format!("n_mismatch: observed {}, required {n}", self.n_observed)),
            _ => None,
        }
    }
}

/// Label surface forms the edit added: forms occurring more often in the
/// explanation than in the input. Purely numeric aliases are ignored.
fn introduced_label(task: &TaskSpec, input: &WordSequence, explanation: &WordSequence) -> Option<String> {
    task.label_surface_forms()
        .into_iter()
        .filter(|form| form.chars().any(char::is_alphabetic))
        .find(|form| count_phrase(explanation, form) > count_phrase(input, form))
        .map(str::to_owned)
}

fn style_check(expl: &SelfExplanation, input: &WordSequence, task: &TaskSpec) -> (Option<StyleViolation>, usize) {
    if !expl.parse_ok {
        let detail = expl.parse_error.clone().unwrap_or_default();
        return (Some(StyleViolation::Unparseable { detail }), 0);
    }
    match expl.style {
        ExplanationStyle::Attribution => {
            let words = expl.words().unwrap_or_default();
            if words.is_empty() {
                return (Some(StyleViolation::EmptyList), 0);
            }
            let missing = words.iter().find(|w| find_word_positions(input, w).is_empty());
            let violation = missing.map(|w| StyleViolation::WordNotInInput { word: w.clone() });
            (violation, words.len())
        }
        ExplanationStyle::Redaction => {
            let redacted = WordSequence::from_text(expl.text().unwrap_or_default());
            if redacted.len() != input.len() {
                let v = StyleViolation::LengthMismatch {
                    input: input.len(),
                    explanation: redacted.len(),
                };
                return (Some(v), 0);
            }
            let mut slots = 0;
            for (i, (orig, red)) in input.words().iter().zip(redacted.words()).enumerate() {
                if is_redaction_slot(red) {
                    slots += 1;
                } else if orig != red {
                    return (Some(StyleViolation::AlteredWord { position: i }), slots);
                }
            }
            let violation = (slots == 0).then_some(StyleViolation::NoRedaction);
            (violation, slots)
        }
        ExplanationStyle::Counterfactual => {
            let text = expl.text().unwrap_or_default();
            let edited = WordSequence::from_text(text);
            let distance = word_edit_distance(input, &edited).distance;
            if text.contains(REDACTED) {
                return (Some(StyleViolation::RedactionToken), distance);
            }
            if let Some(label) = introduced_label(task, input, &edited) {
                return (Some(StyleViolation::LabelName { label }), distance);
            }
            let violation = (distance == 0).then_some(StyleViolation::Unchanged);
            (violation, distance)
        }
    }
}

/// Style condition plus the number-of-words condition.
pub fn check_conditions(
    expl: &SelfExplanation,
    input: &WordSequence,
    task: &TaskSpec,
    n_required: Option<usize>,
) -> ConditionCheck {
    let (violation, n_observed) = style_check(expl, input, task);
    let style_ok = violation.is_none();
    let n_ok = n_required.is_none_or(|n| n == n_observed);
    ConditionCheck {
        style_ok,
        violation,
        n_observed,
        n_required,
        retained: style_ok && n_ok,
    }
}

/// The input fed back for the consistency check. Attribution redacts every
/// occurrence of every listed word; the other styles are their own probe.
pub fn derive_probe(expl: &SelfExplanation, input: &WordSequence) -> Result<String, EvalError> {
    match expl.style {
        ExplanationStyle::Attribution => {
            let words = expl.words().ok_or(EvalError::NotParsed)?;
            let mut positions = BTreeSet::new();
            for w in words {
                let found = find_word_positions(input, w);
                if found.is_empty() {
                    return Err(EvalError::NoMatch(w.clone()));
                }
                positions.extend(found);
            }
            Ok(redact(input, &positions)?.to_text())
        }
        ExplanationStyle::Redaction | ExplanationStyle::Counterfactual => {
            expl.text().map(str::to_owned).ok_or(EvalError::NotParsed)
        }
    }
}
