//! Synthetic corpora, a trigger lexicon and config files for CLI tests.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FILLER: &[&str] = &[
    "the", "day", "was", "my", "friend", "said", "that", "this", "morning", "we", "saw", "a", "film", "about",
    "people", "in", "town", "after", "lunch", "it", "felt", "really",
];

pub const SENTIMENT_TRIGGERS: &[(&str, &str)] = &[
    ("love", "Positive"),
    ("great", "Positive"),
    ("happy", "Positive"),
    ("hate", "Negative"),
    ("awful", "Negative"),
    ("sad", "Negative"),
];

pub const SNLI_TRIGGERS: &[(&str, &str)] = &[("indeed", "Yes"), ("never", "No"), ("perhaps", "Maybe")];

pub const AGNEWS_TRIGGERS: &[(&str, &str)] = &[
    ("election", "World"),
    ("match", "Sport"),
    ("market", "Business"),
    ("software", "Tech"),
];

/// Weak evidence for a label. Each sentence carries the cue of the next
/// label so that removing its trigger flips the prediction.
pub const CUES: &[(&str, &str)] = &[
    ("fine", "Positive"),
    ("meh", "Negative"),
    ("sure", "Yes"),
    ("nope", "No"),
    ("possibly", "Maybe"),
    ("global", "World"),
    ("team", "Sport"),
    ("profit", "Business"),
    ("digital", "Tech"),
];

pub const TRIGGER_WEIGHT: f64 = 4.0;
pub const CUE_WEIGHT: f64 = 1.0;

pub fn cue_for(label: &str) -> &'static str {
    CUES.iter().find(|(_, l)| *l == label).map(|(c, _)| *c).unwrap()
}

/// Filler words with a trigger and a cue inserted at random positions.
pub fn trigger_sentence(rng: &mut ChaCha8Rng, trigger: &str, cue: &str) -> String {
    let len = rng.random_range(5..12);
    let mut words: Vec<&str> = (0..len).map(|_| *FILLER.choose(rng).unwrap()).collect();
    let at = rng.random_range(0..=words.len());
    words.insert(at, trigger);
    let at = rng.random_range(0..=words.len());
    words.insert(at, cue);
    words.join(" ")
}

fn corpus(path: &Path, triggers: &[(&str, &str)], per_label: usize, two_fields: bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    let mut id = 0;
    let mut labels: Vec<&str> = Vec::new();
    for (_, l) in triggers {
        if !labels.contains(l) {
            labels.push(l);
        }
    }
    for _ in 0..per_label {
        for (k, label) in labels.iter().enumerate() {
            let cue = cue_for(labels[(k + 1) % labels.len()]);
            let pick: Vec<&str> = triggers.iter().filter(|(_, l)| l == label).map(|(t, _)| *t).collect();
            let t = pick.choose(&mut rng).unwrap();
            let rec = if two_fields {
                // The mock reads only the premise; the hypothesis is filler.
                let hypothesis = (0..6)
                    .map(|_| *FILLER.choose(&mut rng).unwrap())
                    .collect::<Vec<_>>()
                    .join(" ");
                serde_json::json!({"id": format!("r{id}"), "text": trigger_sentence(&mut rng, t, cue), "text2": hypothesis, "label": label})
            } else {
                serde_json::json!({"id": format!("r{id}"), "text": trigger_sentence(&mut rng, t, cue), "label": label})
            };
            writeln!(out, "{rec}").unwrap();
            id += 1;
        }
    }
    fs::write(path, out).unwrap();
}

/// Lexicon over all three tasks' labels with a fill word per label.
pub fn lexicon(path: &Path) {
    let mut out = String::new();
    let all: Vec<&(&str, &str)> = SENTIMENT_TRIGGERS
        .iter()
        .chain(SNLI_TRIGGERS)
        .chain(AGNEWS_TRIGGERS)
        .collect();
    let mut labels: Vec<&str> = Vec::new();
    for (_, l) in &all {
        if !labels.contains(l) {
            labels.push(l);
        }
    }
    let bias: serde_json::Map<String, serde_json::Value> =
        labels.iter().map(|l| (l.to_string(), serde_json::json!(0.0))).collect();
    writeln!(out, "{}", serde_json::json!({"bias": bias, "labels": labels})).unwrap();
    for (t, l) in &all {
        writeln!(
            out,
            "{}",
            serde_json::json!({"word": t, "weights": {*l: TRIGGER_WEIGHT}})
        )
        .unwrap();
    }
    for (c, l) in CUES {
        writeln!(out, "{}", serde_json::json!({"word": c, "weights": {*l: CUE_WEIGHT}})).unwrap();
    }
    let mut fill = serde_json::Map::new();
    for (t, l) in &all {
        fill.entry(l.to_string()).or_insert(serde_json::json!(t));
    }
    writeln!(out, "{}", serde_json::json!({"fill": fill})).unwrap();
    fs::write(path, out).unwrap();
}

pub struct Fixture {
    pub dir: PathBuf,
    pub config: PathBuf,
}

/// Corpora, lexicon and a config naming `tasks` with the given extra
/// TOML appended.
pub fn fixture(dir: &Path, tasks: &[&str], train: usize, test: usize, extra: &str) -> Fixture {
    lexicon(&dir.join("lexicon.jsonl"));
    let mut cfg = String::from("seed = 17\noutput_dir = \"out\"\nconcurrency = 3\n\n");
    cfg.push_str("[backend]\nkind = \"lexicon\"\nlexicon = \"lexicon.jsonl\"\n\n");
    let per_label = |labels: usize| (train + test) / labels + 4;
    for (i, task) in tasks.iter().enumerate() {
        let file = format!("{task}.jsonl");
        match *task {
            "sentiment140" => corpus(
                &dir.join(&file),
                SENTIMENT_TRIGGERS,
                per_label(2),
                false,
                100 + i as u64,
            ),
            "snli" => corpus(&dir.join(&file), SNLI_TRIGGERS, per_label(3), true, 100 + i as u64),
            "agnews" => corpus(&dir.join(&file), AGNEWS_TRIGGERS, per_label(4), false, 100 + i as u64),
            other => panic!("no fixture for {other}"),
        }
        write!(
            cfg,
            "[[tasks]]\nid = \"{task}\"\ncorpus = \"{file}\"\ntrain_size = {train}\ntest_size = {test}\n\n"
        )
        .unwrap();
    }
    cfg.push_str(extra);
    let config = dir.join("run.toml");
    fs::write(&config, cfg).unwrap();
    Fixture {
        dir: dir.to_owned(),
        config,
    }
}
