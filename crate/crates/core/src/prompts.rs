//! Prompt templates and chat transcripts.
//!
//! Templates are data: a TOML file maps `(task, style, word_mode)` to an
//! ordered list of turns. The bundled file covers the three built-in tasks;
//! [`PromptRegistry::from_toml_str`] loads user-supplied ones.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TaskSpec;

const BUNDLED: &str = include_str!("../assets/prompts.toml");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template {template}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template {template}: unbalanced brace at byte {offset}")]
    UnbalancedBrace { template: String, offset: usize },
    #[error("template {template}: missing binding for {placeholder}")]
    MissingBinding { template: String, placeholder: Placeholder },
    #[error("no template for task {task:?}, style {style}, word mode {word_mode}")]
    MissingTemplate {
        task: String,
        style: Style,
        word_mode: WordMode,
    },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("invalid template file: {0}")]
    Parse(String),
    #[error("template {template}: {reason}")]
    Invalid { template: String, reason: String },
    #[error("transcript turns must alternate starting with user")]
    BadTurnOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Classification,
    Attribution,
    Redaction,
    Counterfactual,
    CfFill,
}

impl Style {
    pub fn as_str(self) -> &'static str {
        match self {
            Style::Classification => "classification",
            Style::Attribution => "attribution",
            Style::Redaction => "redaction",
            Style::Counterfactual => "counterfactual",
            Style::CfFill => "cf_fill",
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The three self-explanation styles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationStyle {
    Attribution,
    Redaction,
    Counterfactual,
}

impl ExplanationStyle {
    pub const ALL: [ExplanationStyle; 3] = [
        ExplanationStyle::Attribution,
        ExplanationStyle::Redaction,
        ExplanationStyle::Counterfactual,
    ];

    pub fn as_str(self) -> &'static str {
        Style::from(self).as_str()
    }
}

impl From<ExplanationStyle> for Style {
    fn from(s: ExplanationStyle) -> Self {
        match s {
            ExplanationStyle::Attribution => Style::Attribution,
            ExplanationStyle::Redaction => Style::Redaction,
            ExplanationStyle::Counterfactual => Style::Counterfactual,
        }
    }
}

impl fmt::Display for ExplanationStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExplanationStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "attribution" => Ok(Self::Attribution),
            "redaction" => Ok(Self::Redaction),
            "counterfactual" => Ok(Self::Counterfactual),
            other => Err(format!("unknown explanation style {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WordMode {
    #[serde(rename = "one_word")]
    OneWord,
    #[serde(rename = "multi_word")]
    MultiWord,
    #[serde(rename = "n/a")]
    NotApplicable,
}

impl WordMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WordMode::OneWord => "one_word",
            WordMode::MultiWord => "multi_word",
            WordMode::NotApplicable => "n/a",
        }
    }
}

impl fmt::Display for WordMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WordMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "one_word" => Ok(Self::OneWord),
            "multi_word" => Ok(Self::MultiWord),
            "n/a" => Ok(Self::NotApplicable),
            other => Err(format!("unknown word mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Placeholder {
    Input,
    SecondInput,
    RedactedInput,
    TargetLabel,
}

impl Placeholder {
    pub fn token(self) -> &'static str {
        match self {
            Placeholder::Input => "{input}",
            Placeholder::SecondInput => "{second input}",
            Placeholder::RedactedInput => "{redacted_input}",
            Placeholder::TargetLabel => "{target_label}",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        match name {
            "input" => Some(Placeholder::Input),
            "second input" => Some(Placeholder::SecondInput),
            "redacted_input" => Some(Placeholder::RedactedInput),
            "target_label" => Some(Placeholder::TargetLabel),
            _ => None,
        }
    }
}

impl fmt::Display for Placeholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Turn {
    #[serde(rename = "role")]
    pub speaker: Speaker,
    #[serde(rename = "content")]
    pub text: String,
}

/// Alternating user/assistant turns, starting with the user.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize)]
#[serde(transparent)]
pub struct ChatTranscript {
    turns: Vec<Turn>,
}

impl ChatTranscript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_turns(turns: Vec<Turn>) -> Result<Self, PromptError> {
        let mut t = Self::new();
        for turn in turns {
            t.push(turn.speaker, turn.text)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, speaker: Speaker, text: impl Into<String>) -> Result<(), PromptError> {
        let expected = if self.turns.len().is_multiple_of(2) {
            Speaker::User
        } else {
            Speaker::Assistant
        };
        if speaker != expected {
            return Err(PromptError::BadTurnOrder);
        }
        self.turns.push(Turn {
            speaker,
            text: text.into(),
        });
        Ok(())
    }

    /// Append another fragment, keeping the alternation.
    pub fn extend(&mut self, other: ChatTranscript) -> Result<(), PromptError> {
        for turn in other.turns {
            self.push(turn.speaker, turn.text)?;
        }
        Ok(())
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn ends_with_user(&self) -> bool {
        self.turns.last().is_some_and(|t| t.speaker == Speaker::User)
    }
}

impl<'de> Deserialize<'de> for ChatTranscript {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let turns = Vec::<Turn>::deserialize(de)?;
        ChatTranscript::from_turns(turns).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(Placeholder),
}

fn parse_segments(template: &str, text: &str) -> Result<Vec<Segment>, PromptError> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        if rest.starts_with("{{") {
            literal.push('{');
            i += 2;
        } else if rest.starts_with("}}") {
            literal.push('}');
            i += 2;
        } else if bytes[i] == b'{' {
            let close = rest.find('}').ok_or(PromptError::UnbalancedBrace {
                template: template.to_owned(),
                offset: i,
            })?;
            let name = &rest[1..close];
            let slot = Placeholder::from_name(name).ok_or_else(|| PromptError::UnknownPlaceholder {
                template: template.to_owned(),
                name: name.to_owned(),
            })?;
            if !literal.is_empty() {
                segments.push(Segment::Literal(std::mem::take(&mut literal)));
            }
            segments.push(Segment::Slot(slot));
            i += close + 1;
        } else if bytes[i] == b'}' {
            return Err(PromptError::UnbalancedBrace {
                template: template.to_owned(),
                offset: i,
            });
        } else {
            let ch = rest.chars().next().expect("nonempty rest");
            literal.push(ch);
            i += ch.len_utf8();
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(segments)
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct TemplateTurn {
    speaker: Speaker,
    segments: Vec<Segment>,
}

/// Values for placeholders. Bound text is substituted literally.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings {
    values: BTreeMap<Placeholder, String>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, placeholder: Placeholder, value: impl Into<String>) -> Self {
        self.values.insert(placeholder, value.into());
        self
    }

    pub fn input(self, value: impl Into<String>) -> Self {
        self.with(Placeholder::Input, value)
    }

    pub fn second_input(self, value: Option<&str>) -> Self {
        match value {
            Some(v) => self.with(Placeholder::SecondInput, v),
            None => self,
        }
    }

    pub fn get(&self, placeholder: Placeholder) -> Option<&str> {
        self.values.get(&placeholder).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TemplateKey {
    pub task: String,
    pub style: Style,
    pub word_mode: WordMode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: String,
    pub style: Style,
    pub word_mode: WordMode,
    turns: Vec<TemplateTurn>,
}

impl PromptTemplate {
    pub fn new(
        template_id: &str,
        style: Style,
        word_mode: WordMode,
        turns: &[(Speaker, &str)],
    ) -> Result<Self, PromptError> {
        let turns = turns
            .iter()
            .map(|(speaker, text)| {
                Ok(TemplateTurn {
                    speaker: *speaker,
                    segments: parse_segments(template_id, text)?,
                })
            })
            .collect::<Result<Vec<_>, PromptError>>()?;
        Ok(Self {
            template_id: template_id.to_owned(),
            style,
            word_mode,
            turns,
        })
    }

    /// Placeholders referenced anywhere in the template, in first-use order.
    pub fn placeholders(&self) -> Vec<Placeholder> {
        let mut seen = Vec::new();
        for turn in &self.turns {
            for seg in &turn.segments {
                if let Segment::Slot(p) = seg {
                    if !seen.contains(p) {
                        seen.push(*p);
                    }
                }
            }
        }
        seen
    }

    pub fn render(&self, bindings: &Bindings) -> Result<ChatTranscript, PromptError> {
        let mut out = ChatTranscript::new();
        for turn in &self.turns {
            let mut text = String::new();
            for seg in &turn.segments {
                match seg {
                    Segment::Literal(s) => text.push_str(s),
                    Segment::Slot(p) => {
                        let value = bindings.get(*p).ok_or(PromptError::MissingBinding {
                            template: self.template_id.clone(),
                            placeholder: *p,
                        })?;
                        text.push_str(value);
                    }
                }
            }
            out.push(turn.speaker, text)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskEntry {
    labels: Vec<String>,
    input_arity: u8,
    #[serde(default)]
    aliases: BTreeMap<String, String>,
    #[serde(default)]
    prompt_set: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateEntry {
    task: String,
    style: Style,
    word_mode: WordMode,
    turns: Vec<TurnEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnEntry {
    role: Speaker,
    text: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    #[serde(default)]
    tasks: BTreeMap<String, TaskEntry>,
    #[serde(default)]
    templates: Vec<TemplateEntry>,
}

/// Immutable after load.
#[derive(Debug, Clone)]
pub struct PromptRegistry {
    tasks: BTreeMap<String, TaskSpec>,
    templates: BTreeMap<TemplateKey, PromptTemplate>,
}

/// The bundled registry for sentiment140, snli and agnews.
pub fn builtin_registry() -> PromptRegistry {
    PromptRegistry::from_toml_str(BUNDLED).expect("bundled prompt file is valid")
}

impl PromptRegistry {
    pub fn from_toml_str(text: &str) -> Result<Self, PromptError> {
        let file: RegistryFile = toml::from_str(text).map_err(|e| PromptError::Parse(e.to_string()))?;
        let mut tasks = BTreeMap::new();
        for (id, entry) in file.tasks {
            let spec = TaskSpec {
                task_id: id.clone(),
                label_names: entry.labels,
                input_arity: entry.input_arity,
                prompt_set_id: entry.prompt_set.unwrap_or_else(|| id.clone()),
                label_aliases: entry.aliases,
            };
            spec.validate().map_err(|e| PromptError::Invalid {
                template: id.clone(),
                reason: e.to_string(),
            })?;
            tasks.insert(id, spec);
        }

        let mut templates = BTreeMap::new();
        for entry in file.templates {
            let id = format!("{}/{}/{}", entry.task, entry.style, entry.word_mode);
            let invalid = |reason: &str| PromptError::Invalid {
                template: id.clone(),
                reason: reason.to_owned(),
            };
            let task = tasks
                .get(&entry.task)
                .ok_or_else(|| invalid("refers to an undeclared task"))?;
            let expects_mode = !matches!(entry.style, Style::Classification | Style::CfFill);
            if expects_mode == (entry.word_mode == WordMode::NotApplicable) {
                return Err(invalid("word_mode must be n/a exactly for classification and cf_fill"));
            }
            let turns: Vec<(Speaker, &str)> = entry.turns.iter().map(|t| (t.role, t.text.as_str())).collect();
            let template = PromptTemplate::new(&id, entry.style, entry.word_mode, &turns)?;
            if template.turns.is_empty() || template.turns[0].speaker != Speaker::User {
                return Err(invalid("must start with a user turn"));
            }
            let used = template.placeholders();
            if task.input_arity == 1 && used.contains(&Placeholder::SecondInput) {
                return Err(invalid("single-input task references {second input}"));
            }
            let allowed: &[Placeholder] = match entry.style {
                Style::Classification => &[Placeholder::Input, Placeholder::SecondInput],
                Style::CfFill => &[
                    Placeholder::RedactedInput,
                    Placeholder::TargetLabel,
                    Placeholder::SecondInput,
                ],
                _ => &[Placeholder::SecondInput],
            };
            if let Some(p) = used.iter().find(|p| !allowed.contains(p)) {
                return Err(invalid(&format!(
                    "placeholder {p} not allowed for style {}",
                    entry.style
                )));
            }
            let key = TemplateKey {
                task: entry.task.clone(),
                style: entry.style,
                word_mode: entry.word_mode,
            };
            if templates.insert(key, template).is_some() {
                return Err(invalid("duplicate template"));
            }
        }

        for task in tasks.values() {
            let key = TemplateKey {
                task: task.task_id.clone(),
                style: Style::Classification,
                word_mode: WordMode::NotApplicable,
            };
            let Some(cls) = templates.get(&key) else {
                return Err(PromptError::Invalid {
                    template: task.task_id.clone(),
                    reason: "task has no classification template".into(),
                });
            };
            let used = cls.placeholders();
            if !used.contains(&Placeholder::Input)
                || (task.input_arity == 2) != used.contains(&Placeholder::SecondInput)
            {
                return Err(PromptError::Invalid {
                    template: cls.template_id.clone(),
                    reason: "classification template must reference {input}, and {second input} exactly when input_arity is 2".into(),
                });
            }
        }
        Ok(Self { tasks, templates })
    }

    pub fn task(&self, task_id: &str) -> Result<&TaskSpec, PromptError> {
        self.tasks
            .get(task_id)
            .ok_or_else(|| PromptError::UnknownTask(task_id.to_owned()))
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.values()
    }

    pub fn get(&self, task: &str, style: Style, word_mode: WordMode) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(&TemplateKey {
                task: task.to_owned(),
                style,
                word_mode,
            })
            .ok_or_else(|| PromptError::MissingTemplate {
                task: task.to_owned(),
                style,
                word_mode,
            })
    }

    pub fn contains(&self, task: &str, style: Style, word_mode: WordMode) -> bool {
        self.get(task, style, word_mode).is_ok()
    }

    pub fn templates(&self) -> impl Iterator<Item = (&TemplateKey, &PromptTemplate)> {
        self.templates.iter()
    }

    /// The classification prompt for one input of `task`.
    pub fn classification_prompt(
        &self,
        task: &TaskSpec,
        input: &str,
        second_input: Option<&str>,
    ) -> Result<ChatTranscript, PromptError> {
        self.get(&task.task_id, Style::Classification, WordMode::NotApplicable)?
            .render(&Bindings::new().input(input).second_input(second_input))
    }
}
