//! End-to-end runs over the lexicon mock: attribution, construction,
//! training-example assembly and self-consistency evaluation.

use std::collections::BTreeMap;

use faithcheck_core::backend::{ExplanationPolicy, LexiconModel};
use faithcheck_core::construction::{build_pseudo, influence_all, PseudoOutcome};
use faithcheck_core::corpus::LabeledInstance;
use faithcheck_core::dataset::{assemble_example, validate_dataset, LOSS_MASK};
use faithcheck_core::evaluation::{evaluate_style, Evaluator, ExplanationSource};
use faithcheck_core::prompts::{builtin_registry, ExplanationStyle, Speaker, WordMode};

const SENTENCE: &str = "I hate waking up early.";

fn model() -> LexiconModel {
    LexiconModel::new(&["Positive", "Negative"])
        .with_word("hate", &[("Positive", -2.0), ("Negative", 2.0)])
        .with_word("love", &[("Positive", 2.0), ("Negative", -2.0)])
        .with_word("dull", &[("Negative", 0.5)])
        .with_fill_word("Positive", "love")
        .with_fill_word("Negative", "hate")
}

fn instance(id: &str, text: &str, label: &str) -> LabeledInstance {
    LabeledInstance {
        id: id.into(),
        input: text.into(),
        second_input: None,
        gold_label: label.into(),
    }
}

/// Redacting the trigger leaves a tie (resolved to Positive) or a weak
/// negative cue, so every prediction flips.
fn corpus() -> Vec<LabeledInstance> {
    let texts = [
        ("a", "I hate waking up early.", "Negative"),
        ("b", "we love the dull park", "Positive"),
        ("c", "they hate long meetings", "Negative"),
        ("d", "you will love this dull song", "Positive"),
    ];
    texts.iter().map(|(id, t, l)| instance(id, t, l)).collect()
}

#[test]
fn figure_one_session() {
    let registry = builtin_registry();
    let task = registry.task("sentiment140").unwrap();
    let m = model();
    let inst = instance("1", SENTENCE, "Negative");

    let a = influence_all(&m, &registry, task, &inst, 2).unwrap();
    assert_eq!(a.y_hat, "Negative");
    assert_eq!(a.w_star, "hate");
    let p = 1.0 / (1.0 + (-4.0f64).exp());
    assert!((a.scores[1].score - (p - 0.5)).abs() < 1e-12);
    assert!(a.scores.iter().filter(|s| s.index != 1).all(|s| s.score == 0.0));

    let payloads: Vec<String> = ExplanationStyle::ALL
        .iter()
        .map(
            |&style| match build_pseudo(&m, &registry, task, &inst, &a, style).unwrap() {
                PseudoOutcome::Accepted(p) => p.payload,
                other => panic!("{other:?}"),
            },
        )
        .collect();
    assert_eq!(
        payloads,
        ["hate", "I [REDACTED] waking up early.", "I love waking up early."]
    );

    let PseudoOutcome::Accepted(p) =
        build_pseudo(&m, &registry, task, &inst, &a, ExplanationStyle::Attribution).unwrap()
    else {
        unreachable!()
    };
    let e = assemble_example(&registry, task, &inst, &a.y_hat, ExplanationStyle::Attribution, &p).unwrap();
    let turns = e.transcript().turns();
    assert_eq!(turns.len(), 4);
    assert!(turns[0].text.contains("Text: I hate waking up early."));
    assert_eq!(turns[1].text, "Negative");
    assert_eq!(turns[3].speaker, Speaker::Assistant);
    assert_eq!(turns[3].text, "Answer: hate");
    assert_eq!(e.loss_mask(), LOSS_MASK);
}

#[test]
fn generated_explanations_are_faithful_for_a_faithful_mock() {
    let registry = builtin_registry();
    let task = registry.task("sentiment140").unwrap();
    for style in ExplanationStyle::ALL {
        let e = evaluate_style(&model(), &registry, task, &corpus(), style, WordMode::OneWord, None).unwrap();
        assert_eq!(e.report.score, Some(1.0), "{style}");
        assert_eq!(e.report.counts.retained, 4);
        assert!(e.report.low_retained);
        let ids: Vec<&str> = e.traces.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c", "d"]);
    }
}

#[test]
fn identity_probe_is_unfaithful() {
    let registry = builtin_registry();
    let task = registry.task("sentiment140").unwrap();
    let ev = Evaluator::new(&registry, task, ExplanationStyle::Redaction, WordMode::OneWord, None).unwrap();
    // One redaction of a neutral word: retained, but the prediction stays.
    let provided = BTreeMap::from([("1".to_owned(), "Answer: I hate [REDACTED] up early.".to_owned())]);
    let e = ev.run(
        &model(),
        &[instance("1", SENTENCE, "Negative")],
        ExplanationSource::Provided(&provided),
    );
    assert_eq!(e.report.counts.retained, 1);
    assert_eq!(e.report.score, Some(0.0));
    assert_eq!(e.traces[0].faithful, Some(false));
}

#[test]
fn validation_arms() {
    let registry = builtin_registry();
    let task = registry.task("sentiment140").unwrap();
    let ev = Evaluator::new(&registry, task, ExplanationStyle::Attribution, WordMode::OneWord, None).unwrap();

    let both = validate_dataset(&model(), &ev, &corpus());
    assert_eq!(both.original.score, Some(1.0));
    assert_eq!(both.constructed.score, Some(1.0));
    assert_eq!(both.construction.accepted, 4);

    let refusing = model().with_policy(ExplanationPolicy::Refuse);
    let r = validate_dataset(&refusing, &ev, &corpus());
    assert_eq!(r.original.counts.retained, 0);
    assert_eq!(r.original.score, None);
    assert_eq!(r.original.counts.excluded_by_style, 4);
    assert_eq!(r.constructed.score, Some(1.0));
}

#[test]
fn format_violations_are_excluded_not_failed() {
    let registry = builtin_registry();
    let task = registry.task("sentiment140").unwrap();
    let m = model().with_policy(ExplanationPolicy::FormatViolator);
    let e = evaluate_style(
        &m,
        &registry,
        task,
        &corpus(),
        ExplanationStyle::Attribution,
        WordMode::OneWord,
        None,
    )
    .unwrap();
    let c = e.report.counts;
    assert_eq!(c.failed, 0);
    assert_eq!(c.retained, 0);
    assert_eq!(c.total, c.excluded_by_style + c.excluded_by_n);
    assert!(c.balanced());
}
