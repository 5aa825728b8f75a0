//! Training examples for explanation fine-tuning, and the comparison of
//! generated against constructed explanations.
//!
//! An example is the four-turn dialogue
//! `[classification prompt, model prediction, explanation instruction,
//! "Answer: <pseudo explanation>"]` with the loss on the last turn only.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::backend::ModelBackend;
use crate::construction::{build_pseudo, influence_all, ConstructionError, FillRejection, PseudoExplanation};
use crate::corpus::{LabeledInstance, TaskSpec};
use crate::evaluation::{EvaluationReport, Evaluator, ExplanationSource};
use crate::parallel::map_bounded;
use crate::prompts::{
    Bindings, ChatTranscript, ExplanationStyle, PromptError, PromptRegistry, Speaker, Turn, WordMode,
};

pub const ANSWER_PREFIX: &str = "Answer: ";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Line { path: String, line: usize, message: String },
    #[error("invalid training example: {0}")]
    Invalid(String),
    #[error("pseudo explanation has style {found}, expected {expected}")]
    StyleMismatch {
        expected: ExplanationStyle,
        found: ExplanationStyle,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub task: String,
    pub style: ExplanationStyle,
    pub id: String,
}

/// A four-turn dialogue whose only trained turn is the last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrainingExample {
    #[serde(rename = "messages")]
    transcript: ChatTranscript,
    loss_mask: Vec<bool>,
    meta: ExampleMeta,
}

pub const LOSS_MASK: [bool; 4] = [false, false, false, true];

impl TrainingExample {
    pub fn new(transcript: ChatTranscript, loss_mask: Vec<bool>, meta: ExampleMeta) -> Result<Self, DatasetError> {
        let speakers: Vec<Speaker> = transcript.turns().iter().map(|t| t.speaker).collect();
        if speakers != [Speaker::User, Speaker::Assistant, Speaker::User, Speaker::Assistant] {
            return Err(DatasetError::Invalid(format!(
                "expected user/assistant/user/assistant turns, got {} turn(s)",
                speakers.len()
            )));
        }
        if loss_mask != LOSS_MASK {
            return Err(DatasetError::Invalid(format!(
                "loss mask must be {LOSS_MASK:?}, got {loss_mask:?}"
            )));
        }
        Ok(Self {
            transcript,
            loss_mask,
            meta,
        })
    }

    pub fn transcript(&self) -> &ChatTranscript {
        &self.transcript
    }

    pub fn loss_mask(&self) -> &[bool] {
        &self.loss_mask
    }

    pub fn meta(&self) -> &ExampleMeta {
        &self.meta
    }

    /// The trained response with its answer prefix removed.
    pub fn payload(&self) -> &str {
        let last = &self.transcript.turns()[3].text;
        last.strip_prefix(ANSWER_PREFIX).unwrap_or(last)
    }
}

impl<'de> Deserialize<'de> for TrainingExample {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            messages: ChatTranscript,
            loss_mask: Vec<bool>,
            meta: ExampleMeta,
        }
        let raw = Raw::deserialize(d)?;
        TrainingExample::new(raw.messages, raw.loss_mask, raw.meta).map_err(serde::de::Error::custom)
    }
}

/// Build the training dialogue for one instance. `y_hat` is the model's
/// own prediction, not the gold label.
pub fn assemble_example(
    prompts: &PromptRegistry,
    task: &TaskSpec,
    instance: &LabeledInstance,
    y_hat: &str,
    style: ExplanationStyle,
    pseudo: &PseudoExplanation,
) -> Result<TrainingExample, DatasetError> {
    if pseudo.style != style {
        return Err(DatasetError::StyleMismatch {
            expected: style,
            found: pseudo.style,
        });
    }
    let second = instance.second_input.as_deref();
    let mut transcript = prompts.classification_prompt(task, &instance.input, second)?;
    transcript.push(Speaker::Assistant, y_hat)?;
    let instruction = prompts
        .get(&task.task_id, style.into(), WordMode::OneWord)?
        .render(&Bindings::new().input(instance.input.as_str()).second_input(second))?;
    transcript.extend(instruction)?;
    transcript.push(Speaker::Assistant, format!("{ANSWER_PREFIX}{}", pseudo.payload))?;
    TrainingExample::new(
        transcript,
        LOSS_MASK.to_vec(),
        ExampleMeta {
            task: task.task_id.clone(),
            style,
            id: instance.id.clone(),
        },
    )
}

pub fn example_line(example: &TrainingExample) -> String {
    serde_json::to_string(example).expect("training example serializes")
}

/// Write examples as jsonl, one per line.
pub fn emit_training_file(examples: &[TrainingExample], path: &Path) -> Result<(), DatasetError> {
    let lines: Vec<String> = examples.iter().map(example_line).collect();
    write_lines(&lines, path)
}

pub fn write_lines(lines: &[String], path: &Path) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for line in lines {
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

fn read_nonempty_lines(path: &Path) -> Result<Vec<(usize, String)>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    Ok(lines)
}

pub fn read_training_file(path: &Path) -> Result<Vec<TrainingExample>, DatasetError> {
    read_nonempty_lines(path)?
        .into_iter()
        .map(|(line, text)| {
            serde_json::from_str(&text).map_err(|e| DatasetError::Line {
                path: path.display().to_string(),
                line,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Instruction-tuning records copied into the mix. Each line must hold a
/// `messages` array of `{role, content}`; a missing `loss_mask` defaults to
/// training on every assistant turn. Other fields are kept as given.
pub fn load_passthrough(path: &Path) -> Result<Vec<String>, DatasetError> {
    let bad = |line: usize, message: String| DatasetError::Line {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (line, text) in read_nonempty_lines(path)? {
        let mut obj: Map<String, Value> = serde_json::from_str(&text).map_err(|e| bad(line, e.to_string()))?;
        let messages = obj
            .get("messages")
            .cloned()
            .ok_or_else(|| bad(line, "missing \"messages\"".into()))?;
        let turns: Vec<Turn> = serde_json::from_value(messages).map_err(|e| bad(line, e.to_string()))?;
        if !obj.contains_key("loss_mask") {
            let mask: Vec<bool> = turns.iter().map(|t| t.speaker == Speaker::Assistant).collect();
            obj.insert("loss_mask".into(), Value::from(mask));
        }
        out.push(Value::Object(obj).to_string());
    }
    Ok(out)
}

/// Interleave two streams. The positions taken by each stream are a
/// seeded shuffle; each stream keeps its own order.
pub fn mix_records(constructed: Vec<String>, passthrough: Vec<String>, seed: u64) -> Vec<String> {
    let mut slots: Vec<bool> = std::iter::repeat_n(true, constructed.len())
        .chain(std::iter::repeat_n(false, passthrough.len()))
        .collect();
    slots.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut a = constructed.into_iter();
    let mut b = passthrough.into_iter();
    slots
        .into_iter()
        .map(|from_a| if from_a { a.next() } else { b.next() }.expect("slot counts match"))
        .collect()
}

/// Construction and scoring of one style's pseudo explanations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstructionCounts {
    pub attempted: usize,
    pub accepted: usize,
    pub rejected: BTreeMap<String, usize>,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetValidationReport {
    pub task: String,
    pub style: ExplanationStyle,
    pub sample_size: usize,
    pub original: EvaluationReport,
    pub constructed: EvaluationReport,
    pub construction: ConstructionCounts,
}

pub enum ConstructedItem {
    Accepted {
        y_hat: String,
        pseudo: PseudoExplanation,
        attribution: crate::construction::AttributionResult,
    },
    Rejected {
        reason: FillRejection,
        attribution: crate::construction::AttributionResult,
    },
    Failed(ConstructionError),
}

/// Influence plus pseudo explanation for each instance, in input order.
pub fn construct_all<B: ModelBackend + ?Sized>(
    backend: &B,
    prompts: &PromptRegistry,
    task: &TaskSpec,
    instances: &[LabeledInstance],
    style: ExplanationStyle,
    concurrency: usize,
) -> Vec<ConstructedItem> {
    map_bounded(instances, concurrency, |_, inst| {
        let attribution = match influence_all(backend, prompts, task, inst, 1) {
            Ok(a) => a,
            Err(e) => return ConstructedItem::Failed(e),
        };
        match build_pseudo(backend, prompts, task, inst, &attribution, style) {
            Ok(outcome) => match outcome.accepted() {
                Some(p) => ConstructedItem::Accepted {
                    y_hat: attribution.y_hat.clone(),
                    pseudo: p.clone(),
                    attribution,
                },
                None => ConstructedItem::Rejected {
                    reason: outcome.rejection().unwrap_or(FillRejection::Unparseable),
                    attribution,
                },
            },
            Err(e) => ConstructedItem::Failed(e),
        }
    })
}

/// Score explanations the model writes itself (arm A) against the
/// constructed ones (arm B) with one evaluator. Arm B covers the instances
/// whose construction was accepted.
pub fn validate_dataset<B: ModelBackend + ?Sized>(
    backend: &B,
    evaluator: &Evaluator<'_>,
    instances: &[LabeledInstance],
) -> DatasetValidationReport {
    let original = evaluator.evaluate(backend, instances);

    let items = construct_all(
        backend,
        evaluator.prompts,
        evaluator.task,
        instances,
        evaluator.style,
        evaluator.concurrency,
    );
    let mut counts = ConstructionCounts {
        attempted: instances.len(),
        ..Default::default()
    };
    let mut provided = BTreeMap::new();
    let mut kept = Vec::new();
    for (inst, item) in instances.iter().zip(items) {
        match item {
            ConstructedItem::Accepted { pseudo, .. } => {
                counts.accepted += 1;
                provided.insert(inst.id.clone(), format!("{ANSWER_PREFIX}{}", pseudo.payload));
                kept.push(inst.clone());
            }
            ConstructedItem::Rejected { reason, .. } => {
                *counts.rejected.entry(reason.as_str().to_owned()).or_default() += 1;
            }
            ConstructedItem::Failed(_) => counts.failed += 1,
        }
    }
    let constructed = evaluator.run(backend, &kept, ExplanationSource::Provided(&provided));

    DatasetValidationReport {
        task: evaluator.task.task_id.clone(),
        style: evaluator.style,
        sample_size: instances.len(),
        original: original.report,
        constructed: constructed.report,
        construction: counts,
    }
}
