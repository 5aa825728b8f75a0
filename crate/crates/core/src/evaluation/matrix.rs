//! Generalization matrices: rows are training tags, columns evaluation
//! tasks or styles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EvalError, EvaluationReport, MIN_RETAINED};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreCell {
    pub score: Option<f64>,
    pub retained: usize,
}

impl From<&EvaluationReport> for ScoreCell {
    fn from(r: &EvaluationReport) -> Self {
        Self {
            score: r.score,
            retained: r.counts.retained,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub train_tag: String,
    pub column: String,
    pub cell: ScoreCell,
}

impl MatrixEntry {
    pub fn new(train_tag: &str, column: &str, cell: impl Into<ScoreCell>) -> Self {
        Self {
            train_tag: train_tag.to_owned(),
            column: column.to_owned(),
            cell: cell.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    /// Tagged score minus baseline score.
    Gain,
    /// Scores as measured.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub row: String,
    pub column: String,
    pub value: Option<f64>,
    pub score: Option<f64>,
    pub baseline: Option<f64>,
    pub retained: usize,
    pub baseline_retained: usize,
    pub low_retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub kind: MatrixKind,
    pub baseline_tag: String,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<MatrixCell>,
}

/// Assemble a matrix. Every column needs a baseline entry. Gain matrices
/// drop the baseline row; raw matrices keep it.
pub fn cross_matrix(kind: MatrixKind, baseline_tag: &str, entries: &[MatrixEntry]) -> Result<Matrix, EvalError> {
    let mut rows: Vec<String> = Vec::new();
    let mut columns: Vec<String> = Vec::new();
    let mut table: BTreeMap<(&str, &str), ScoreCell> = BTreeMap::new();
    for e in entries {
        if table.insert((&e.train_tag, &e.column), e.cell).is_some() {
            return Err(EvalError::DuplicateCell {
                row: e.train_tag.clone(),
                column: e.column.clone(),
            });
        }
        if !rows.contains(&e.train_tag) {
            rows.push(e.train_tag.clone());
        }
        if !columns.contains(&e.column) {
            columns.push(e.column.clone());
        }
    }
    if kind == MatrixKind::Gain {
        rows.retain(|r| r != baseline_tag);
    }

    let mut cells = Vec::new();
    for row in &rows {
        for column in &columns {
            let Some(cell) = table.get(&(row.as_str(), column.as_str())) else {
                continue;
            };
            let base = table
                .get(&(baseline_tag, column.as_str()))
                .ok_or_else(|| EvalError::MissingBaseline {
                    baseline: baseline_tag.to_owned(),
                    column: column.clone(),
                })?;
            let value = match kind {
                MatrixKind::Gain => cell.score.zip(base.score).map(|(s, b)| s - b),
                MatrixKind::Raw => cell.score,
            };
            let low_retained =
                cell.retained < MIN_RETAINED || (kind == MatrixKind::Gain && base.retained < MIN_RETAINED);
            cells.push(MatrixCell {
                row: row.clone(),
                column: column.clone(),
                value,
                score: cell.score,
                baseline: base.score,
                retained: cell.retained,
                baseline_retained: base.retained,
                low_retained,
            });
        }
    }
    Ok(Matrix {
        kind,
        baseline_tag: baseline_tag.to_owned(),
        rows,
        columns,
        cells,
    })
}

impl Matrix {
    pub fn cell(&self, row: &str, column: &str) -> Option<&MatrixCell> {
        self.cells.iter().find(|c| c.row == row && c.column == column)
    }

    /// Value as printed: signed for gains, three decimals, empty when
    /// undefined.
    pub fn format_value(&self, value: Option<f64>) -> String {
        match (self.kind, value) {
            (_, None) => String::new(),
            (MatrixKind::Gain, Some(v)) => format!("{v:+.3}"),
            (MatrixKind::Raw, Some(v)) => format!("{v:.3}"),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,column,value,score,baseline,retained,baseline_retained,low_retained\n");
        let num = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                csv_field(&c.row),
                csv_field(&c.column),
                self.format_value(c.value),
                num(c.score),
                num(c.baseline),
                c.retained,
                c.baseline_retained,
                c.low_retained
            ));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}
