use serde::{Deserialize, Serialize};

use super::WordSequence;

/// One word-level edit. Positions index the sequence as it stands when the
/// operation is applied, with operations applied in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    Insert { position: usize, word: String },
    Delete { position: usize },
    Substitute { position: usize, word: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditScript {
    pub operations: Vec<EditOp>,
    pub distance: usize,
}

impl EditScript {
    /// Apply the script to `source`. Returns `None` if an operation points
    /// outside the sequence.
    pub fn apply(&self, source: &WordSequence) -> Option<WordSequence> {
        let mut words: Vec<String> = source.words().to_vec();
        for op in &self.operations {
            match op {
                EditOp::Insert { position, word } => {
                    if *position > words.len() {
                        return None;
                    }
                    words.insert(*position, word.clone());
                }
                EditOp::Delete { position } => {
                    if *position >= words.len() {
                        return None;
                    }
                    words.remove(*position);
                }
                EditOp::Substitute { position, word } => {
                    *words.get_mut(*position)? = word.clone();
                }
            }
        }
        Some(WordSequence::from_words(words))
    }
}

/// Unit-cost Levenshtein distance over word tokens, with a script realizing it.
///
/// Tokens compare by exact string equality. Among minimal scripts the
/// backtrace prefers match/substitute, then delete, then insert.
pub fn word_edit_distance(a: &WordSequence, b: &WordSequence) -> EditScript {
    let (src, dst) = (a.words(), b.words());
    let (n, m) = (src.len(), dst.len());
    let width = m + 1;
    let mut table = vec![0usize; (n + 1) * width];
    for i in 0..=n {
        table[i * width] = i;
    }
    for (j, cell) in table.iter_mut().take(width).enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(src[i - 1] != dst[j - 1]);
            let diag = table[(i - 1) * width + j - 1] + cost;
            let up = table[(i - 1) * width + j] + 1;
            let left = table[i * width + j - 1] + 1;
            table[i * width + j] = diag.min(up).min(left);
        }
    }

    // Walk back from (n, m) to (0, 0), collecting steps in reverse.
    enum Step {
        Keep,
        Sub,
        Del,
        Ins,
    }
    let mut steps = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = table[i * width + j];
        if i > 0 && j > 0 {
            let same = src[i - 1] == dst[j - 1];
            let diag = table[(i - 1) * width + j - 1] + usize::from(!same);
            if diag == here {
                steps.push(if same { Step::Keep } else { Step::Sub });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && table[(i - 1) * width + j] + 1 == here {
            steps.push(Step::Del);
            i -= 1;
        } else {
            steps.push(Step::Ins);
            j -= 1;
        }
    }

    // Forward pass: the working sequence is dst[..j] ++ src[i..], so the
    // current position of src[i] is always j.
    let mut operations = Vec::new();
    let mut j = 0;
    for step in steps.into_iter().rev() {
        match step {
            Step::Keep => j += 1,
            Step::Sub => {
                operations.push(EditOp::Substitute {
                    position: j,
                    word: dst[j].clone(),
                });
                j += 1;
            }
            Step::Del => operations.push(EditOp::Delete { position: j }),
            Step::Ins => {
                operations.push(EditOp::Insert {
                    position: j,
                    word: dst[j].clone(),
                });
                j += 1;
            }
        }
    }
    let distance = table[n * width + m];
    debug_assert_eq!(distance, operations.len());
    EditScript { operations, distance }
}
