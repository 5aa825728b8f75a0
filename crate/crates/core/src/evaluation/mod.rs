//! Self-consistency evaluation of self-explanations.
//!
//! For each instance: classify, ask for an explanation in the same session,
//! parse and check it, derive a probe input, classify the probe in a fresh
//! session and count the explanation faithful when the prediction changes.

mod checks;
mod matrix;

pub use checks::{
    check_conditions, derive_probe, parse_explanation, ConditionCheck, Parsed, SelfExplanation, StyleViolation,
};
pub use matrix::{cross_matrix, Matrix, MatrixCell, MatrixEntry, MatrixKind, ScoreCell};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{self, BackendError, ModelBackend};
use crate::corpus::{LabeledInstance, TaskSpec};
use crate::parallel::map_bounded;
use crate::prompts::{Bindings, ChatTranscript, ExplanationStyle, PromptError, PromptRegistry, Speaker, WordMode};
use crate::textops::{is_redaction_slot, CountedExplanation, TextError, WordSequence};

/// Groups with fewer retained instances than this are flagged.
pub const MIN_RETAINED: usize = 50;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("explanation was not parsed")]
    NotParsed,
    #[error("no explanation supplied for instance {0}")]
    MissingExplanation(String),
    #[error("listed word {0:?} does not occur in the input")]
    NoMatch(String),
    #[error("no baseline {baseline:?} cell for column {column:?}")]
    MissingBaseline { baseline: String, column: String },
    #[error("duplicate matrix cell ({row:?}, {column:?})")]
    DuplicateCell { row: String, column: String },
    #[error("word mode {0} has no explanation prompts")]
    BadWordMode(WordMode),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaithfulnessVerdict {
    pub probe_input: String,
    pub original_prediction: String,
    pub probe_prediction: String,
    pub faithful: bool,
}

/// Classify `probe` in a session holding nothing but the classification
/// prompt.
pub fn judge<B: ModelBackend + ?Sized>(
    backend: &B,
    prompts: &PromptRegistry,
    task: &TaskSpec,
    instance: &LabeledInstance,
    probe: &str,
    original_prediction: &str,
) -> Result<FaithfulnessVerdict, EvalError> {
    let session = prompts.classification_prompt(task, probe, instance.second_input.as_deref())?;
    let c = backend::classify(backend, &session, &task.label_names)?;
    let probe_prediction = c.predicted_label().to_owned();
    Ok(FaithfulnessVerdict {
        probe_input: probe.to_owned(),
        original_prediction: original_prediction.to_owned(),
        faithful: probe_prediction != original_prediction,
        probe_prediction,
    })
}

/// One line of the per-instance trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceTrace {
    pub id: String,
    pub input: String,
    pub prediction: Option<String>,
    pub raw_explanation: Option<String>,
    pub parsed: Option<Parsed>,
    pub style_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub n_observed: Option<usize>,
    pub retained: bool,
    pub probe: Option<String>,
    pub probe_prediction: Option<String>,
    pub faithful: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Failed,
    ExcludedByStyle,
    ExcludedByN,
    Retained { faithful: bool },
}

impl InstanceTrace {
    fn new(instance: &LabeledInstance) -> Self {
        Self {
            id: instance.id.clone(),
            input: instance.input.clone(),
            prediction: None,
            raw_explanation: None,
            parsed: None,
            style_ok: false,
            reason: None,
            n_observed: None,
            retained: false,
            probe: None,
            probe_prediction: None,
            faithful: None,
            failed: None,
        }
    }

    /// What this trace's explanation contributes to a frequency table. A
    /// text explanation holding a redaction slot counts as a redaction,
    /// any other text as an edit.
    pub fn counted(&self) -> Option<CountedExplanation> {
        match self.parsed.as_ref()? {
            Parsed::Words(words) => Some(CountedExplanation::Listed(words.clone())),
            Parsed::Text(text) => {
                let original = WordSequence::from_text(&self.input);
                let changed = WordSequence::from_text(text);
                if changed.words().iter().any(|w| is_redaction_slot(w)) {
                    Some(CountedExplanation::Redacted {
                        original,
                        redacted: changed,
                    })
                } else {
                    Some(CountedExplanation::Edited {
                        original,
                        edited: changed,
                    })
                }
            }
        }
    }

    pub fn outcome(&self) -> Outcome {
        if self.failed.is_some() {
            Outcome::Failed
        } else if !self.style_ok {
            Outcome::ExcludedByStyle
        } else if !self.retained {
            Outcome::ExcludedByN
        } else {
            Outcome::Retained {
                faithful: self.faithful == Some(true),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub retained: usize,
    pub excluded_by_style: usize,
    pub excluded_by_n: usize,
    pub failed: usize,
}

impl Counts {
    pub fn balanced(&self) -> bool {
        self.total == self.retained + self.excluded_by_style + self.excluded_by_n + self.failed
    }
}

/// Faithfulness among retained explanations of one observed size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    pub retained: usize,
    pub faithful: usize,
    pub score: Option<f64>,
    pub low_retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task: String,
    pub style: ExplanationStyle,
    pub word_mode: WordMode,
    pub n_required: Option<usize>,
    pub counts: Counts,
    pub faithful: usize,
    /// `faithful / retained`; null when nothing was retained.
    pub score: Option<f64>,
    pub low_retained: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_n: Option<Vec<GroupStats>>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Fold traces into a report. Per-size groups are attached in multi-word
/// mode.
pub fn aggregate(
    task: &str,
    style: ExplanationStyle,
    word_mode: WordMode,
    n_required: Option<usize>,
    traces: &[InstanceTrace],
) -> EvaluationReport {
    let mut counts = Counts {
        total: traces.len(),
        ..Counts::default()
    };
    let mut faithful = 0;
    let mut groups: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for t in traces {
        match t.outcome() {
            Outcome::Failed => counts.failed += 1,
            Outcome::ExcludedByStyle => counts.excluded_by_style += 1,
            Outcome::ExcludedByN => counts.excluded_by_n += 1,
            Outcome::Retained { faithful: f } => {
                counts.retained += 1;
                faithful += usize::from(f);
                let g = groups.entry(t.n_observed.unwrap_or(0)).or_default();
                g.0 += 1;
                g.1 += usize::from(f);
            }
        }
    }
    let per_n = (word_mode == WordMode::MultiWord).then(|| {
        groups
            .into_iter()
            .map(|(n, (retained, faithful))| GroupStats {
                n,
                retained,
                faithful,
                score: ratio(faithful, retained),
                low_retained: retained < MIN_RETAINED,
            })
            .collect()
    });
    EvaluationReport {
        task: task.to_owned(),
        style,
        word_mode,
        n_required,
        score: ratio(faithful, counts.retained),
        low_retained: counts.retained < MIN_RETAINED,
        counts,
        faithful,
        per_n,
    }
}

/// Where explanations come from.
#[derive(Debug, Clone, Copy)]
pub enum ExplanationSource<'a> {
    /// Ask the backend in the classification session.
    Generate,
    /// Use these raw answers, keyed by instance id.
    Provided(&'a BTreeMap<String, String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvaluationReport,
    /// Sorted by instance id.
    pub traces: Vec<InstanceTrace>,
}

/// Everything that determines how explanations are scored.
#[derive(Debug, Clone)]
pub struct Evaluator<'a> {
    pub prompts: &'a PromptRegistry,
    pub task: &'a TaskSpec,
    pub style: ExplanationStyle,
    pub word_mode: WordMode,
    pub n_required: Option<usize>,
    pub concurrency: usize,
}

impl<'a> Evaluator<'a> {
    /// One-word mode requires exactly one word; multi-word mode accepts any
    /// count unless `n_required` is given.
    pub fn new(
        prompts: &'a PromptRegistry,
        task: &'a TaskSpec,
        style: ExplanationStyle,
        word_mode: WordMode,
        n_required: Option<usize>,
    ) -> Result<Self, EvalError> {
        let n_required = match word_mode {
            WordMode::OneWord => Some(n_required.unwrap_or(1)),
            WordMode::MultiWord => n_required,
            WordMode::NotApplicable => return Err(EvalError::BadWordMode(word_mode)),
        };
        prompts.get(&task.task_id, style.into(), word_mode)?;
        Ok(Self {
            prompts,
            task,
            style,
            word_mode,
            n_required,
            concurrency: 1,
        })
    }

    pub fn with_concurrency(mut self, concurrency: usize) -> Self {
        self.concurrency = concurrency.max(1);
        self
    }

    /// The instruction turn that asks for an explanation.
    pub fn instruction(&self, instance: &LabeledInstance) -> Result<ChatTranscript, EvalError> {
        let template = self
            .prompts
            .get(&self.task.task_id, self.style.into(), self.word_mode)?;
        Ok(template.render(
            &Bindings::new()
                .input(instance.input.as_str())
                .second_input(instance.second_input.as_deref()),
        )?)
    }

    pub fn evaluate<B: ModelBackend + ?Sized>(&self, backend: &B, instances: &[LabeledInstance]) -> Evaluation {
        self.run(backend, instances, ExplanationSource::Generate)
    }

    pub fn run<B: ModelBackend + ?Sized>(
        &self,
        backend: &B,
        instances: &[LabeledInstance],
        source: ExplanationSource<'_>,
    ) -> Evaluation {
        let mut traces = map_bounded(instances, self.concurrency, |_, inst| {
            self.evaluate_instance(backend, inst, source)
        });
        traces.sort_by(|a, b| a.id.cmp(&b.id));
        let report = aggregate(&self.task.task_id, self.style, self.word_mode, self.n_required, &traces);
        Evaluation { report, traces }
    }

    fn evaluate_instance<B: ModelBackend + ?Sized>(
        &self,
        backend: &B,
        instance: &LabeledInstance,
        source: ExplanationSource<'_>,
    ) -> InstanceTrace {
        let mut trace = InstanceTrace::new(instance);
        if let Err(e) = self.fill_trace(backend, instance, source, &mut trace) {
            trace.failed = Some(e.to_string());
            trace.retained = false;
        }
        trace
    }

    fn fill_trace<B: ModelBackend + ?Sized>(
        &self,
        backend: &B,
        instance: &LabeledInstance,
        source: ExplanationSource<'_>,
        trace: &mut InstanceTrace,
    ) -> Result<(), EvalError> {
        let input = instance.words();
        let mut session =
            self.prompts
                .classification_prompt(self.task, &input.to_text(), instance.second_input.as_deref())?;
        let c = backend::classify(backend, &session, &self.task.label_names)?;
        let prediction = c.predicted_label().to_owned();
        trace.prediction = Some(prediction.clone());

        let raw = match source {
            ExplanationSource::Generate => {
                session.push(Speaker::Assistant, prediction.as_str())?;
                session.extend(self.instruction(instance)?)?;
                backend::generate(backend, &session)?
            }
            ExplanationSource::Provided(map) => map
                .get(&instance.id)
                .cloned()
                .ok_or_else(|| EvalError::MissingExplanation(instance.id.clone()))?,
        };
        let expl = parse_explanation(&raw, self.style, self.word_mode);
        trace.raw_explanation = Some(raw);
        trace.parsed = expl.parsed.clone();

        let check = check_conditions(&expl, &input, self.task, self.n_required);
        trace.style_ok = check.style_ok;
        trace.reason = check.reason();
        trace.n_observed = Some(check.n_observed);
        trace.retained = check.retained;
        if !check.retained {
            return Ok(());
        }

        let probe = derive_probe(&expl, &input)?;
        trace.probe = Some(probe.clone());
        let verdict = judge(backend, self.prompts, self.task, instance, &probe, &prediction)?;
        trace.probe_prediction = Some(verdict.probe_prediction);
        trace.faithful = Some(verdict.faithful);
        Ok(())
    }
}

/// Evaluate one (task, style, word mode) serially with explanations
/// generated by `backend`. Use [`Evaluator`] to run instances concurrently.
pub fn evaluate_style<B: ModelBackend + ?Sized>(
    backend: &B,
    prompts: &PromptRegistry,
    task: &TaskSpec,
    instances: &[LabeledInstance],
    style: ExplanationStyle,
    word_mode: WordMode,
    n_required: Option<usize>,
) -> Result<Evaluation, EvalError> {
    let evaluator = Evaluator::new(prompts, task, style, word_mode, n_required)?;
    Ok(evaluator.evaluate(backend, instances))
}
