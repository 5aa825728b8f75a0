//! Classification corpora: loading, balanced sampling and split statistics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textops::{tokenize, WordSequence};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{} malformed row(s): {}", .0.len(), summarize(.0))]
    Rows(Vec<RowError>),
    #[error("label {label:?} needs {needed} instances but only {available} are available")]
    Insufficient {
        label: String,
        needed: usize,
        available: usize,
    },
    #[error("invalid task {task:?}: {reason}")]
    InvalidTask { task: String, reason: String },
    #[error("unknown corpus format {0:?} (expected csv, tsv or jsonl)")]
    UnknownFormat(String),
}

fn summarize(rows: &[RowError]) -> String {
    let shown: Vec<String> = rows.iter().take(5).map(ToString::to_string).collect();
    let mut out = shown.join("; ");
    if rows.len() > 5 {
        out.push_str(&format!("; and {} more", rows.len() - 5));
    }
    out
}

/// A rejected row. `row` is the 1-based line number in the source file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub row: usize,
    pub kind: RowErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RowErrorKind {
    UnknownLabel(String),
    MissingField(&'static str),
    EmptyText(&'static str),
    Malformed(String),
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            RowErrorKind::UnknownLabel(label) => {
                write!(f, "row {}: unknown label {label:?}", self.row)
            }
            RowErrorKind::MissingField(field) => {
                write!(f, "row {}: missing field {field:?}", self.row)
            }
            RowErrorKind::EmptyText(field) => write!(f, "row {}: empty {field:?}", self.row),
            RowErrorKind::Malformed(msg) => write!(f, "row {}: {msg}", self.row),
        }
    }
}

/// A classification task: its answer labels and input shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub label_names: Vec<String>,
    pub input_arity: u8,
    pub prompt_set_id: String,
    /// Alternative spellings accepted when loading gold labels, e.g.
    /// `"entailment" -> "Yes"`. Matched case-insensitively.
    #[serde(default)]
    pub label_aliases: BTreeMap<String, String>,
}

impl TaskSpec {
    pub fn new(task_id: &str, labels: &[&str], input_arity: u8) -> Result<Self, CorpusError> {
        let spec = Self {
            task_id: task_id.to_owned(),
            label_names: labels.iter().map(|l| (*l).to_owned()).collect(),
            input_arity,
            prompt_set_id: task_id.to_owned(),
            label_aliases: BTreeMap::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: &str| CorpusError::InvalidTask {
            task: self.task_id.clone(),
            reason: reason.to_owned(),
        };
        if self.label_names.len() < 2 {
            return Err(invalid("needs at least two labels"));
        }
        if self.label_names.iter().any(|l| l.trim().is_empty()) {
            return Err(invalid("label names must be nonempty"));
        }
        let distinct: HashSet<&String> = self.label_names.iter().collect();
        if distinct.len() != self.label_names.len() {
            return Err(invalid("label names must be distinct"));
        }
        if !matches!(self.input_arity, 1 | 2) {
            return Err(invalid("input_arity must be 1 or 2"));
        }
        if let Some((alias, target)) = self
            .label_aliases
            .iter()
            .find(|(_, target)| !self.label_names.contains(target))
        {
            return Err(invalid(&format!("alias {alias:?} points at unknown label {target:?}")));
        }
        Ok(())
    }

    /// Canonical label for a raw value: an exact label name, or an alias.
    pub fn resolve_label(&self, raw: &str) -> Option<&str> {
        let raw = raw.trim();
        if let Some(name) = self.label_names.iter().find(|l| *l == raw) {
            return Some(name);
        }
        self.label_aliases
            .iter()
            .find(|(alias, _)| alias.eq_ignore_ascii_case(raw))
            .map(|(_, target)| target.as_str())
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_names.iter().position(|l| l == label)
    }

    /// Label names plus aliases: every surface form a label can take.
    pub fn label_surface_forms(&self) -> Vec<&str> {
        self.label_names
            .iter()
            .map(String::as_str)
            .chain(self.label_aliases.keys().map(String::as_str))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub id: String,
    #[serde(rename = "text")]
    pub input: String,
    #[serde(rename = "text2", default, skip_serializing_if = "Option::is_none")]
    pub second_input: Option<String>,
    #[serde(rename = "label")]
    pub gold_label: String,
}

impl LabeledInstance {
    pub fn words(&self) -> WordSequence {
        WordSequence::from_text(&self.input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Csv,
    Tsv,
    Jsonl,
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "tsv" => Ok(Self::Tsv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(CorpusError::UnknownFormat(other.to_owned())),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
struct RawRecord {
    #[serde(default, deserialize_with = "string_or_number")]
    id: Option<String>,
    text: Option<String>,
    text2: Option<String>,
    label: Option<String>,
}

fn string_or_number<'de, D>(de: D) -> Result<Option<String>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        Text(String),
        Number(serde_json::Number),
    }
    Ok(Option::<Id>::deserialize(de)?.map(|id| match id {
        Id::Text(s) => s,
        Id::Number(n) => n.to_string(),
    }))
}

/// Load and validate a corpus. Any malformed row fails the whole load, with
/// every offending row listed.
pub fn load_corpus(path: &Path, format: CorpusFormat, task: &TaskSpec) -> Result<Vec<LabeledInstance>, CorpusError> {
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&content, format, task)
}

/// Parse corpus text already in memory.
pub fn parse_corpus(content: &str, format: CorpusFormat, task: &TaskSpec) -> Result<Vec<LabeledInstance>, CorpusError> {
    let mut rows: Vec<(usize, Result<RawRecord, String>)> = Vec::new();
    match format {
        CorpusFormat::Jsonl => {
            for (i, line) in content.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let parsed = serde_json::from_str::<RawRecord>(line).map_err(|e| e.to_string());
                rows.push((i + 1, parsed));
            }
        }
        CorpusFormat::Csv | CorpusFormat::Tsv => {
            let delimiter = if format == CorpusFormat::Csv { b',' } else { b'\t' };
            let mut reader = csv::ReaderBuilder::new()
                .delimiter(delimiter)
                .has_headers(true)
                .flexible(false)
                .from_reader(content.as_bytes());
            let headers = match reader.headers() {
                Ok(h) => h.clone(),
                Err(e) => {
                    return Err(CorpusError::Rows(vec![RowError {
                        row: 1,
                        kind: RowErrorKind::Malformed(e.to_string()),
                    }]))
                }
            };
            for record in reader.records() {
                match record {
                    Ok(rec) => {
                        let row = rec.position().map_or(rows.len() + 2, |p| p.line() as usize);
                        let parsed = rec.deserialize::<RawRecord>(Some(&headers)).map_err(|e| e.to_string());
                        rows.push((row, parsed));
                    }
                    Err(e) => {
                        let row = e.position().map_or(rows.len() + 2, |p| p.line() as usize);
                        rows.push((row, Err(e.to_string())));
                    }
                }
            }
        }
    }

    let mut instances = Vec::with_capacity(rows.len());
    let mut errors = Vec::new();
    for (index, (row, raw)) in rows.into_iter().enumerate() {
        match raw
            .map_err(RowErrorKind::Malformed)
            .and_then(|r| validate_row(r, index, task))
        {
            Ok(instance) => instances.push(instance),
            Err(kind) => errors.push(RowError { row, kind }),
        }
    }
    if errors.is_empty() {
        Ok(instances)
    } else {
        Err(CorpusError::Rows(errors))
    }
}

fn validate_row(raw: RawRecord, index: usize, task: &TaskSpec) -> Result<LabeledInstance, RowErrorKind> {
    let text = raw.text.ok_or(RowErrorKind::MissingField("text"))?;
    if tokenize(&text).is_empty() {
        return Err(RowErrorKind::EmptyText("text"));
    }
    let second_input = if task.input_arity == 2 {
        let t2 = raw.text2.ok_or(RowErrorKind::MissingField("text2"))?;
        if tokenize(&t2).is_empty() {
            return Err(RowErrorKind::EmptyText("text2"));
        }
        Some(t2)
    } else {
        None
    };
    let label = raw.label.ok_or(RowErrorKind::MissingField("label"))?;
    let gold_label = task
        .resolve_label(&label)
        .ok_or(RowErrorKind::UnknownLabel(label.clone()))?
        .to_owned();
    let id = match raw.id {
        Some(id) if !id.trim().is_empty() => id,
        _ => format!("row-{index}"),
    };
    Ok(LabeledInstance {
        id,
        input: text,
        second_input,
        gold_label,
    })
}

/// Write instances as canonical jsonl.
pub fn write_jsonl<W: Write>(mut out: W, instances: &[LabeledInstance]) -> io::Result<()> {
    for instance in instances {
        serde_json::to_writer(&mut out, instance)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draw `n` instances with per-label counts differing by at most one.
///
/// When `n` is not divisible by the label count the surplus goes to labels
/// in task order. The output order is a deterministic function of `seed`.
pub fn balanced_sample(
    instances: &[LabeledInstance],
    task: &TaskSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledInstance>, CorpusError> {
    let labels = &task.label_names;
    let base = n / labels.len();
    let surplus = n % labels.len();
    let mut rng = rng_for(seed);
    let mut sample = Vec::with_capacity(n);
    for (li, label) in labels.iter().enumerate() {
        let needed = base + usize::from(li < surplus);
        let mut pool: Vec<&LabeledInstance> = instances.iter().filter(|i| &i.gold_label == label).collect();
        if pool.len() < needed {
            return Err(CorpusError::Insufficient {
                label: label.clone(),
                needed,
                available: pool.len(),
            });
        }
        pool.shuffle(&mut rng);
        sample.extend(pool.into_iter().take(needed).cloned());
    }
    sample.shuffle(&mut rng);
    Ok(sample)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub count: usize,
    pub avg_input_length: f64,
    /// Absent for single-input tasks.
    pub avg_second_input_length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub train: FieldStats,
    pub test: FieldStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<LabeledInstance>,
    pub test: Vec<LabeledInstance>,
}

impl CorpusSplit {
    /// Balanced, disjoint train and test samples. Test is drawn first so its
    /// contents do not depend on the train size.
    pub fn sample(
        instances: &[LabeledInstance],
        task: &TaskSpec,
        train_size: usize,
        test_size: usize,
        seed: u64,
    ) -> Result<Self, CorpusError> {
        let test = balanced_sample(instances, task, test_size, seed)?;
        let taken: HashSet<&str> = test.iter().map(|i| i.id.as_str()).collect();
        let rest: Vec<LabeledInstance> = instances
            .iter()
            .filter(|i| !taken.contains(i.id.as_str()))
            .cloned()
            .collect();
        let train = balanced_sample(&rest, task, train_size, seed.wrapping_add(1))?;
        Ok(Self { train, test })
    }
}

pub fn field_stats(instances: &[LabeledInstance]) -> FieldStats {
    let count = instances.len();
    let mean = |total: usize, n: usize| if n == 0 { 0.0 } else { total as f64 / n as f64 };
    let input_total: usize = instances.iter().map(|i| tokenize(&i.input).len()).sum();
    let seconds: Vec<usize> = instances
        .iter()
        .filter_map(|i| i.second_input.as_deref().map(|t| tokenize(t).len()))
        .collect();
    FieldStats {
        count,
        avg_input_length: mean(input_total, count),
        avg_second_input_length: (!seconds.is_empty()).then(|| mean(seconds.iter().sum(), seconds.len())),
    }
}

pub fn split_stats(split: &CorpusSplit) -> SplitStats {
    SplitStats {
        train: field_stats(&split.train),
        test: field_stats(&split.test),
    }
}
