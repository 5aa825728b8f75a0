//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use faithcheck_cli::{cmd_evaluate, make_backend, LoadedConfig, Run};
use faithcheck_core::backend::{ExplanationPolicy, LexiconModel};
use faithcheck_core::construction::{build_pseudo, influence_all, PseudoOutcome};
use faithcheck_core::corpus::{LabeledInstance, TaskSpec};
use faithcheck_core::dataset::{
    assemble_example, emit_training_file, mix_records, read_training_file, validate_dataset, ANSWER_PREFIX,
};
use faithcheck_core::evaluation::{
    check_conditions, cross_matrix, parse_explanation, Evaluator, ExplanationSource, MatrixEntry, MatrixKind, ScoreCell,
};
use faithcheck_core::prompts::{builtin_registry, ExplanationStyle, PromptRegistry, Speaker, WordMode};
use faithcheck_core::textops::{word_edit_distance, WordSequence};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

/// Tag, name, check and optional time limit.
type Criterion = (&'static str, &'static str, fn() -> Outcome, Option<Duration>);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

fn lexicon_model() -> LexiconModel {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lexicon.jsonl");
    common::lexicon(&path);
    LexiconModel::load(&path).unwrap()
}

/// Sentiment sentences with one trigger each, labels alternating.
fn trigger_corpus(n: usize, seed: u64) -> Vec<LabeledInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positive: Vec<&str> = common::SENTIMENT_TRIGGERS
        .iter()
        .filter(|(_, l)| *l == "Positive")
        .map(|(t, _)| *t)
        .collect();
    let negative: Vec<&str> = common::SENTIMENT_TRIGGERS
        .iter()
        .filter(|(_, l)| *l == "Negative")
        .map(|(t, _)| *t)
        .collect();
    (0..n)
        .map(|i| {
            let (label, triggers, cue) = if i % 2 == 0 {
                ("Positive", &positive, common::cue_for("Negative"))
            } else {
                ("Negative", &negative, common::cue_for("Positive"))
            };
            let trigger = triggers.choose(&mut rng).unwrap();
            LabeledInstance {
                id: format!("s{i:04}"),
                input: common::trigger_sentence(&mut rng, trigger, cue),
                second_input: None,
                gold_label: label.to_owned(),
            }
        })
        .collect()
}

// ------------------------------------------------------------------ AC1

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn first_max(values: &[f64], tol: f64) -> usize {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values.iter().position(|v| *v >= max - tol).unwrap()
}

fn influence_oracle() -> Outcome {
    const VOCAB: &[&str] = &[
        "amber", "birch", "cedar", "delta", "ember", "fjord", "grove", "heath", "inlet", "juniper", "kelp", "larch",
    ];
    let registry = builtin_registry();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    let mut ties = 0;
    for case in 0..200 {
        let task_id = ["sentiment140", "snli", "agnews"][case % 3];
        let task = registry.task(task_id).unwrap();
        let labels: Vec<&str> = task.label_names.iter().map(String::as_str).collect();
        let k = labels.len();

        let bias: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut weights: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        let mut model = LexiconModel::new(&labels);
        for (l, b) in labels.iter().zip(&bias) {
            model = model.with_bias(l, *b);
        }
        // Two thirds of the vocabulary is known to the model.
        for w in VOCAB {
            if !rng.random_bool(0.67) {
                continue;
            }
            let ws: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let pairs: Vec<(&str, f64)> = labels.iter().copied().zip(ws.iter().copied()).collect();
            model = model.with_word(w, &pairs);
            weights.insert(w, ws);
        }

        let m = rng.random_range(1..=10);
        let words: Vec<&str> = (0..m).map(|_| *VOCAB.choose(&mut rng).unwrap()).collect();
        let instance = LabeledInstance {
            id: format!("c{case}"),
            input: words.join(" "),
            second_input: (task.input_arity == 2).then(|| "a hypothesis".to_owned()),
            gold_label: labels[0].to_owned(),
        };
        let result = influence_all(&model, &registry, task, &instance, 2).map_err(|e| e.to_string())?;

        let logits = |skip: Option<usize>| -> Vec<f64> {
            let mut out = bias.clone();
            for (i, w) in words.iter().enumerate() {
                if Some(i) == skip {
                    continue;
                }
                if let Some(ws) = weights.get(w) {
                    for (o, x) in out.iter_mut().zip(ws) {
                        *o += x;
                    }
                }
            }
            out
        };
        let dist = softmax(&logits(None));
        let y = first_max(&dist, 0.0);
        ensure!(
            result.y_hat == labels[y],
            "case {case}: y_hat {} vs {}",
            result.y_hat,
            labels[y]
        );
        ensure!(
            (result.p_yhat - dist[y]).abs() <= 1e-9,
            "case {case}: p_yhat {} vs {}",
            result.p_yhat,
            dist[y]
        );
        let expected: Vec<f64> = (0..m).map(|i| dist[y] - softmax(&logits(Some(i)))[y]).collect();
        for (s, e) in result.scores.iter().zip(&expected) {
            ensure!(
                (s.score - e).abs() <= 1e-9,
                "case {case} position {}: {} vs {e}",
                s.index,
                s.score
            );
        }
        ensure!(
            result.scores.len() == m,
            "case {case}: {} scores for {m} words",
            result.scores.len()
        );
        let star = first_max(&expected, 1e-12);
        ensure!(
            result.w_star_index == star,
            "case {case}: w* {} vs {star}",
            result.w_star_index
        );
        let distinct: BTreeSet<&str> = words.iter().copied().collect();
        ties += usize::from(distinct.len() < m);
        checked += m;
    }
    Ok(format!(
        "200 models, {checked} scores within 1e-9, {ties} inputs with repeated words"
    ))
}

// ------------------------------------------------------------------ AC2

fn lev(a: &[u8], b: &[u8]) -> usize {
    match (a, b) {
        ([], _) => b.len(),
        (_, []) => a.len(),
        ([x, ra @ ..], [y, rb @ ..]) if x == y => lev(ra, rb),
        ([_, ra @ ..], [_, rb @ ..]) => 1 + lev(ra, b).min(lev(a, rb)).min(lev(ra, rb)),
    }
}

fn lev_dp(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn all_sequences(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn edit_distance_oracle() -> Outcome {
    const WORDS: [&str; 3] = ["red", "green", "blue"];
    let seqs = all_sequences(5, 3);
    let as_words: Vec<WordSequence> = seqs
        .iter()
        .map(|s| WordSequence::from_words(s.iter().map(|&c| WORDS[c as usize])))
        .collect();
    let mut pairs = 0;
    for (a, wa) in seqs.iter().zip(&as_words) {
        for (b, wb) in seqs.iter().zip(&as_words) {
            let script = word_edit_distance(wa, wb);
            let expected = lev(a, b);
            ensure!(
                script.distance == expected,
                "{a:?} -> {b:?}: {} vs {expected}",
                script.distance
            );
            ensure!(
                script.operations.len() == expected,
                "{a:?} -> {b:?}: script has {} ops",
                script.operations.len()
            );
            ensure!(
                script.apply(wa).as_ref() == Some(wb),
                "{a:?} -> {b:?}: script does not reproduce target"
            );
            pairs += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let vocab: Vec<String> = (0..6).map(|i| format!("w{i}")).collect();
    for i in 0..1000 {
        let mut draw = || {
            let n = rng.random_range(6..=40);
            (0..n)
                .map(|_| vocab.choose(&mut rng).unwrap().clone())
                .collect::<Vec<_>>()
        };
        let (a, b) = (draw(), draw());
        let wa = WordSequence::from_words(a.iter());
        let wb = WordSequence::from_words(b.iter());
        let script = word_edit_distance(&wa, &wb);
        let expected = lev_dp(&a, &b);
        ensure!(
            script.distance == expected,
            "random pair {i}: {} vs {expected}",
            script.distance
        );
        ensure!(
            script.apply(&wa).as_ref() == Some(&wb),
            "random pair {i}: script does not reproduce target"
        );
    }
    Ok(format!("{pairs} exhaustive pairs exact, 1000 random pairs match DP"))
}

// ------------------------------------------------------------------ AC3

struct Constructed {
    instances: Vec<LabeledInstance>,
    payloads: BTreeMap<ExplanationStyle, BTreeMap<String, String>>,
    y_hat: BTreeMap<String, String>,
    pseudo: BTreeMap<(ExplanationStyle, String), faithcheck_core::construction::PseudoExplanation>,
}

fn construct(
    model: &LexiconModel,
    registry: &PromptRegistry,
    task: &TaskSpec,
    n: usize,
) -> Result<Constructed, String> {
    let instances = trigger_corpus(n, 5);
    let mut payloads: BTreeMap<ExplanationStyle, BTreeMap<String, String>> = BTreeMap::new();
    let mut y_hat = BTreeMap::new();
    let mut pseudo = BTreeMap::new();
    for inst in &instances {
        let a = influence_all(model, registry, task, inst, 1).map_err(|e| e.to_string())?;
        let trigger = common::SENTIMENT_TRIGGERS.iter().any(|(t, _)| *t == a.w_star);
        ensure!(trigger, "{}: w* {:?} is not the trigger", inst.id, a.w_star);
        y_hat.insert(inst.id.clone(), a.y_hat.clone());
        for style in ExplanationStyle::ALL {
            match build_pseudo(model, registry, task, inst, &a, style).map_err(|e| e.to_string())? {
                PseudoOutcome::Accepted(p) => {
                    payloads
                        .entry(style)
                        .or_default()
                        .insert(inst.id.clone(), format!("{ANSWER_PREFIX}{}", p.payload));
                    pseudo.insert((style, inst.id.clone()), p);
                }
                PseudoOutcome::Rejected(fill) => {
                    return Err(format!("{}: {style} rejected: {:?}", inst.id, fill.rejection))
                }
            }
        }
    }
    Ok(Constructed {
        instances,
        payloads,
        y_hat,
        pseudo,
    })
}

fn construction_faithful() -> Outcome {
    let model = lexicon_model();
    let registry = builtin_registry();
    let task = registry.task("sentiment140").unwrap();
    let c = construct(&model, &registry, task, 500)?;
    let mut traces = BTreeMap::new();
    for style in ExplanationStyle::ALL {
        let ev = Evaluator::new(&registry, task, style, WordMode::OneWord, None)
            .map_err(|e| e.to_string())?
            .with_concurrency(4);
        let result = ev.run(&model, &c.instances, ExplanationSource::Provided(&c.payloads[&style]));
        let r = &result.report;
        ensure!(
            r.counts.retained == 500,
            "{style}: retained {} of 500 ({:?})",
            r.counts.retained,
            r.counts
        );
        ensure!(r.score == Some(1.0), "{style}: score {:?}", r.score);
        traces.insert(style, result.traces);
    }
    let attr = &traces[&ExplanationStyle::Attribution];
    let red = &traces[&ExplanationStyle::Redaction];
    for (a, r) in attr.iter().zip(red) {
        ensure!(a.id == r.id, "trace order differs: {} vs {}", a.id, r.id);
        ensure!(
            a.probe == r.probe,
            "{}: probes differ: {:?} vs {:?}",
            a.id,
            a.probe,
            r.probe
        );
        ensure!(a.faithful == r.faithful, "{}: verdicts differ", a.id);
    }
    Ok("500 sentences, faithfulness 1.0 for all three styles, attribution/redaction probes identical".into())
}

// ------------------------------------------------------------------ AC4

struct Case {
    style: ExplanationStyle,
    mode: WordMode,
    n: Option<usize>,
    raw: &'static str,
    retained: bool,
    style_ok: bool,
    reason: Option<&'static str>,
    n_observed: usize,
}

#[allow(clippy::too_many_arguments)]
const fn case(
    style: ExplanationStyle,
    mode: WordMode,
    n: Option<usize>,
    raw: &'static str,
    retained: bool,
    style_ok: bool,
    reason: Option<&'static str>,
    n_observed: usize,
) -> Case {
    Case {
        style,
        mode,
        n,
        raw,
        retained,
        style_ok,
        reason,
        n_observed,
    }
}

fn condition_suite() -> Outcome {
    use ExplanationStyle::{Attribution as A, Counterfactual as C, Redaction as R};
    use WordMode::{MultiWord as Multi, OneWord as One};
    let input_text = "i really hate this awful day";
    let cases = [
        case(A, One, Some(1), "Answer: hate", true, true, None, 1),
        case(
            A,
            One,
            Some(1),
            "Answer: love",
            false,
            false,
            Some("word_not_in_input: love"),
            1,
        ),
        case(A, One, Some(1), "hate", false, false, Some("unparseable"), 0),
        case(A, Multi, None, r#"{"words": ["hate", "awful"]}"#, true, true, None, 2),
        case(
            A,
            Multi,
            Some(1),
            r#"{"words": ["hate", "awful"]}"#,
            false,
            true,
            Some("n_mismatch: observed 2, required 1"),
            2,
        ),
        case(A, Multi, None, r#"{"words": []}"#, false, false, Some("empty_list"), 0),
        case(
            A,
            Multi,
            Some(2),
            "Answer: hate, awful",
            false,
            false,
            Some("unparseable"),
            0,
        ),
        case(
            R,
            One,
            Some(1),
            "Answer: i really [REDACTED] this awful day",
            true,
            true,
            None,
            1,
        ),
        case(
            R,
            One,
            Some(1),
            "Answer: i really [REDACTED] this [REDACTED] day",
            false,
            true,
            Some("n_mismatch: observed 2, required 1"),
            2,
        ),
        case(
            R,
            One,
            Some(1),
            "Answer: i really hate this awful day",
            false,
            false,
            Some("no_redaction"),
            0,
        ),
        case(
            R,
            One,
            Some(1),
            "Answer: i really [REDACTED] that awful day",
            false,
            false,
            Some("altered_word: position 3"),
            1,
        ),
        case(
            R,
            One,
            Some(1),
            "Answer: i [REDACTED] day",
            false,
            false,
            Some("length_mismatch"),
            0,
        ),
        case(
            R,
            Multi,
            None,
            r#"{"redacted_text": "i really [REDACTED] this [REDACTED] day"}"#,
            true,
            true,
            None,
            2,
        ),
        case(
            C,
            One,
            Some(1),
            "Answer: i really love this awful day",
            true,
            true,
            None,
            1,
        ),
        case(
            C,
            One,
            Some(1),
            "Answer: i really [REDACTED] this awful day",
            false,
            false,
            Some("redaction_token"),
            1,
        ),
        case(
            C,
            One,
            Some(1),
            "Answer: i really Positive this awful day",
            false,
            false,
            Some("label_name: Positive"),
            1,
        ),
        case(
            C,
            One,
            Some(1),
            "Answer: i really hate this awful day",
            false,
            false,
            Some("unchanged"),
            0,
        ),
        case(
            C,
            One,
            Some(1),
            "Answer: i really love this great day",
            false,
            true,
            Some("n_mismatch: observed 2, required 1"),
            2,
        ),
        case(
            C,
            Multi,
            None,
            r#"{"edited_text": "i really love this great day"}"#,
            true,
            true,
            None,
            2,
        ),
        case(
            C,
            One,
            Some(1),
            "Answer: i love this awful day",
            false,
            true,
            Some("n_mismatch: observed 2, required 1"),
            2,
        ),
    ];

    let registry = builtin_registry();
    let task = registry.task("sentiment140").unwrap();
    let input = WordSequence::from_text(input_text);
    for (i, c) in cases.iter().enumerate() {
        let expl = parse_explanation(c.raw, c.style, c.mode);
        let check = check_conditions(&expl, &input, task, c.n);
        let reason = check.reason();
        let reason_ok = match (c.reason, reason.as_deref()) {
            (None, None) => true,
            (Some(want), Some(got)) => got.starts_with(want),
            _ => false,
        };
        ensure!(
            check.retained == c.retained
                && check.style_ok == c.style_ok
                && reason_ok
                && check.n_observed == c.n_observed,
            "case {i} ({:?}): got retained={} style_ok={} reason={reason:?} n={}",
            c.raw,
            check.retained,
            check.style_ok,
            check.n_observed
        );
    }

    // Accounting identity over a mixed batch, one run per style/mode.
    let model = lexicon_model();
    let mut groups: BTreeMap<(ExplanationStyle, WordMode, Option<usize>), Vec<&Case>> = BTreeMap::new();
    for c in &cases {
        groups.entry((c.style, c.mode, c.n)).or_default().push(c);
    }
    let mut batches = 0;
    for ((style, mode, n), group) in groups {
        let mut instances = Vec::new();
        let mut provided = BTreeMap::new();
        for (i, c) in group.iter().enumerate() {
            let id = format!("x{i:02}");
            provided.insert(id.clone(), c.raw.to_owned());
            instances.push(LabeledInstance {
                id,
                input: input_text.to_owned(),
                second_input: None,
                gold_label: "Negative".into(),
            });
        }
        // One instance with no explanation counts as failed.
        instances.push(LabeledInstance {
            id: "x99".into(),
            input: input_text.to_owned(),
            second_input: None,
            gold_label: "Negative".into(),
        });
        let ev = Evaluator::new(&registry, task, style, mode, n).map_err(|e| e.to_string())?;
        let r = ev
            .run(&model, &instances, ExplanationSource::Provided(&provided))
            .report;
        let want_retained = group.iter().filter(|c| c.retained).count();
        let want_style = group.iter().filter(|c| !c.style_ok).count();
        let want_n = group.iter().filter(|c| c.style_ok && !c.retained).count();
        let counts = r.counts;
        ensure!(
            counts.total == group.len() + 1
                && counts.retained == want_retained
                && counts.excluded_by_style == want_style
                && counts.excluded_by_n == want_n
                && counts.failed == 1
                && counts.balanced(),
            "{style}/{mode}: counts {counts:?}"
        );
        ensure!(
            counts.total == counts.retained + counts.excluded_by_style + counts.excluded_by_n + counts.failed,
            "{style}/{mode}: identity broken"
        );
        batches += 1;
    }
    Ok(format!(
        "{} cases exact, accounting identity holds over {batches} batches",
        cases.len()
    ))
}

// ------------------------------------------------------------------ AC5

fn corrupted_generation_gap() -> Outcome {
    const RATE: f64 = 0.7;
    let model = lexicon_model().with_policy(ExplanationPolicy::Noisy { rate: RATE, seed: 11 });
    let registry = builtin_registry();
    let task = registry.task("sentiment140").unwrap();
    let instances = trigger_corpus(1000, 9);
    let ev = Evaluator::new(&registry, task, ExplanationStyle::Attribution, WordMode::OneWord, None)
        .map_err(|e| e.to_string())?
        .with_concurrency(4);
    let report = validate_dataset(&model, &ev, &instances);
    let original = report.original.score.ok_or("original score undefined")?;
    let constructed = report.constructed.score.ok_or("constructed score undefined")?;
    let gap = constructed - original;
    ensure!(
        report.original.counts.retained == 1000,
        "original retained {}",
        report.original.counts.retained
    );
    ensure!(
        report.constructed.counts.retained == 1000,
        "constructed retained {}",
        report.constructed.counts.retained
    );
    ensure!(
        constructed > original,
        "constructed {constructed} <= original {original}"
    );
    ensure!(gap >= 0.3, "gap {gap:.3} < 0.3");
    ensure!((gap - RATE).abs() <= 0.1, "gap {gap:.3} not within 0.1 of {RATE}");
    Ok(format!(
        "original {original:.3}, constructed {constructed:.3}, gap {gap:.3} (expected {RATE})"
    ))
}

// ------------------------------------------------------------------ AC6

fn training_file_contract() -> Outcome {
    let model = lexicon_model();
    let registry = builtin_registry();
    let task = registry.task("sentiment140").unwrap();
    let c = construct(&model, &registry, task, 60)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut examples_checked = 0;
    for style in ExplanationStyle::ALL {
        let mut examples = Vec::new();
        for inst in &c.instances {
            let p = &c.pseudo[&(style, inst.id.clone())];
            let e = assemble_example(&registry, task, inst, &c.y_hat[&inst.id], style, p).map_err(|e| e.to_string())?;
            examples.push(e);
        }
        let path = dir.path().join(format!("{}.jsonl", style.as_str()));
        emit_training_file(&examples, &path).map_err(|e| e.to_string())?;
        let back = read_training_file(&path).map_err(|e| e.to_string())?;
        ensure!(back == examples, "{style}: round trip changed the examples");
        for e in &back {
            let turns = e.transcript().turns();
            let last = turns.len() - 1;
            ensure!(
                turns[last].speaker == Speaker::Assistant,
                "{style}: final turn is not the assistant's"
            );
            let masked: Vec<usize> = e
                .loss_mask()
                .iter()
                .enumerate()
                .filter(|(_, m)| **m)
                .map(|(i, _)| i)
                .collect();
            ensure!(masked == [last], "{style}: mask {:?}", e.loss_mask());
            ensure!(
                turns[last].text.starts_with(ANSWER_PREFIX),
                "{style}: final turn {:?}",
                turns[last].text
            );
            examples_checked += 1;
        }
    }

    let constructed: Vec<String> = (0..50_000).map(|i| format!("c{i}")).collect();
    let passthrough: Vec<String> = (0..10_000).map(|i| format!("p{i}")).collect();
    let mixed = mix_records(constructed.clone(), passthrough.clone(), 42);
    ensure!(mixed.len() == 60_000, "mixed length {}", mixed.len());
    let again = mix_records(constructed.clone(), passthrough.clone(), 42);
    ensure!(mixed == again, "same seed gave a different interleaving");
    let other = mix_records(constructed.clone(), passthrough.clone(), 43);
    ensure!(mixed != other, "different seeds gave the same interleaving");
    let from_c: Vec<&String> = mixed.iter().filter(|l| l.starts_with('c')).collect();
    let from_p: Vec<&String> = mixed.iter().filter(|l| l.starts_with('p')).collect();
    ensure!(
        from_c.len() == 50_000 && from_p.len() == 10_000,
        "proportions {}/{}",
        from_c.len(),
        from_p.len()
    );
    ensure!(
        from_c.iter().copied().eq(constructed.iter()),
        "constructed order not kept"
    );
    ensure!(
        from_p.iter().copied().eq(passthrough.iter()),
        "passthrough order not kept"
    );

    let path = dir.path().join("mixed.jsonl");
    faithcheck_core::dataset::write_lines(&mixed, &path).map_err(|e| e.to_string())?;
    let lines = fs::read_to_string(&path).map_err(|e| e.to_string())?.lines().count();
    ensure!(lines == 60_000, "mixed file has {lines} lines");
    Ok(format!(
        "{examples_checked} examples round-trip with final-turn masks, 60,000 mixed lines deterministic"
    ))
}

// ------------------------------------------------------------------ AC7

fn evaluate_into(dir: &Path) -> Result<(), String> {
    let fx = common::fixture(dir, &["sentiment140", "snli", "agnews"], 10, 24, "");
    let loaded = LoadedConfig::load(&fx.config).map_err(|e| format!("{e:#}"))?;
    let backend = make_backend(&loaded.config.backend).map_err(|e| format!("{e:#}"))?;
    cmd_evaluate(&Run {
        loaded: &loaded,
        backend: backend.as_ref(),
        quiet: true,
    })
    .map_err(|e| format!("{e:#}"))?;
    Ok(())
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_owned()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn evaluate_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    evaluate_into(a.path())?;
    evaluate_into(b.path())?;
    let mut compared = 0;
    for sub in ["reports", "traces"] {
        let ta = tree(&a.path().join("out/evaluate").join(sub));
        let tb = tree(&b.path().join("out/evaluate").join(sub));
        ensure!(ta.len() == 9, "{sub}: {} files, expected 9", ta.len());
        ensure!(ta.keys().eq(tb.keys()), "{sub}: file sets differ");
        for (name, bytes) in &ta {
            ensure!(Some(bytes) == tb.get(name), "{sub}/{name} differs between runs");
            compared += 1;
        }
    }
    Ok(format!(
        "{compared} report and trace files byte-identical across two runs"
    ))
}

// ------------------------------------------------------------------ AC8

fn gain_arithmetic() -> Outcome {
    let cell = |score| ScoreCell {
        score: Some(score),
        retained: 900,
    };
    let m = cross_matrix(
        MatrixKind::Gain,
        "untrained",
        &[
            MatrixEntry::new("untrained", "sentiment140", cell(0.140)),
            MatrixEntry::new("sentiment140", "sentiment140", cell(0.255)),
        ],
    )
    .map_err(|e| e.to_string())?;
    let c = m.cell("sentiment140", "sentiment140").ok_or("missing cell")?;
    let value = c.value.ok_or("null gain")?;
    let shown = m.format_value(c.value);
    ensure!(shown == "+0.115", "formatted gain {shown}");
    ensure!(value == 0.255 - 0.140, "gain {value} is not 0.255 - 0.140");
    ensure!((value - 0.115).abs() < 1e-12, "gain {value}");
    Ok(format!("gain {shown}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (
            "AC1",
            "influence oracle",
            influence_oracle,
            Some(Duration::from_secs(10)),
        ),
        (
            "AC2",
            "edit-distance oracle",
            edit_distance_oracle,
            Some(Duration::from_secs(30)),
        ),
        (
            "AC3",
            "construction faithful by design",
            construction_faithful,
            Some(Duration::from_secs(60)),
        ),
        ("AC4", "condition-check table", condition_suite, None),
        (
            "AC5",
            "constructed beats corrupted generation",
            corrupted_generation_gap,
            None,
        ),
        ("AC6", "training-file contract", training_file_contract, None),
        ("AC7", "evaluate determinism", evaluate_determinism, None),
        ("AC8", "gain-matrix arithmetic", gain_arithmetic, None),
    ];
    let mut failed = 0;
    for (tag, name, f, limit) in criteria {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:.2?}, limit {limit:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {tag} {name}: {detail} [{elapsed:.2?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {tag} {name}: {detail} [{elapsed:.2?}]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} of 8 criteria failed");
        ExitCode::FAILURE
    }
}
