use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use faithcheck_core::backend::{HttpBackend, LexiconModel, ModelBackend};
use faithcheck_core::construction::{
    build_pseudo, influence_all, AttributionLogRecord, AttributionResult, ConstructionError, FillRejection,
    PseudoOutcome,
};
use faithcheck_core::corpus::{load_corpus, CorpusSplit, LabeledInstance, TaskSpec};
use faithcheck_core::dataset::{
    assemble_example, example_line, load_passthrough, mix_records, validate_dataset, ConstructionCounts,
    TrainingExample,
};
use faithcheck_core::evaluation::{cross_matrix, EvaluationReport, Evaluator, InstanceTrace, MatrixEntry, MatrixKind};
use faithcheck_core::parallel::map_bounded;
use faithcheck_core::prompts::{ExplanationStyle, WordMode};
use faithcheck_core::textops::top_frequent_words;
use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::json;

use crate::config::{BackendConfig, LoadedConfig, TaskConfig};
use crate::output::{unix_now, Manifest, Outputs};

/// The backend could not be reached or answered nothing usable.
#[derive(Debug)]
pub struct BackendFailure(pub String);

impl fmt::Display for BackendFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "backend failure: {}", self.0)
    }
}

impl std::error::Error for BackendFailure {}

/// Instance-level tally for the exit status.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub total: usize,
    pub failed: usize,
}

impl RunSummary {
    fn add(&mut self, total: usize, failed: usize) {
        self.total += total;
        self.failed += failed;
    }

    pub fn partial(&self) -> bool {
        self.failed > 0
    }
}

pub fn make_backend(config: &BackendConfig) -> Result<Box<dyn ModelBackend>> {
    Ok(match config {
        BackendConfig::Lexicon {
            lexicon,
            policy,
            fill_policy,
        } => {
            let mut m = LexiconModel::load(lexicon)?;
            if let Some(p) = policy {
                m = m.with_policy(p.clone());
            }
            if let Some(p) = fill_policy {
                m = m.with_fill_policy(p.clone());
            }
            Box::new(m)
        }
        BackendConfig::Http(h) => Box::new(HttpBackend::new(h.clone())?),
    })
}

/// Shared state for one command run.
pub struct Run<'a> {
    pub loaded: &'a LoadedConfig,
    pub backend: &'a dyn ModelBackend,
    pub quiet: bool,
}

impl Run<'_> {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn task(&self, t: &TaskConfig) -> Result<&TaskSpec> {
        Ok(self.loaded.registry.task(&t.id)?)
    }

    fn split(&self, t: &TaskConfig) -> Result<(TaskSpec, CorpusSplit)> {
        let spec = self.task(t)?.clone();
        let instances = load_corpus(&t.corpus, t.corpus_format()?, &spec)?;
        let split = CorpusSplit::sample(&instances, &spec, t.train_size, t.test_size, self.loaded.config.seed)
            .with_context(|| format!("sampling task {}", t.id))?;
        Ok((spec, split))
    }

    fn outputs(&self, command: &str) -> Outputs {
        Outputs::new(self.loaded.config.output_dir.join(command))
    }

    fn finish(&self, command: &str, started_at: u64, outputs: Outputs, counts: serde_json::Value) -> Result<PathBuf> {
        let root = outputs.root.clone();
        let manifest = Manifest {
            command: command.to_owned(),
            config_path: self.loaded.path.display().to_string(),
            config_sha256: crate::output::sha256_hex(self.loaded.raw.as_bytes()),
            seed: self.loaded.config.seed,
            backend: serde_json::to_value(self.backend.identity())?,
            started_at,
            finished_at: unix_now(),
            counts,
            outputs: outputs.into_entries(),
        };
        let path = root.join("run_manifest.json");
        crate::output::write_json(&path, &manifest)?;
        Ok(path)
    }
}

fn check_total_failure(summary: &RunSummary, what: &str) -> Result<()> {
    if summary.total > 0 && summary.failed == summary.total {
        return Err(BackendFailure(format!("every {what} failed")).into());
    }
    Ok(())
}

#[derive(Debug, Default, Serialize)]
struct TaskBuildReport {
    instances: usize,
    influence_failed: usize,
    degraded: usize,
    styles: BTreeMap<String, ConstructionCounts>,
}

pub fn cmd_build_dataset(run: &Run<'_>) -> Result<RunSummary> {
    let started = unix_now();
    let cfg = &run.loaded.config;
    let registry = &run.loaded.registry;
    let mut out = run.outputs("build-dataset");
    let mut summary = RunSummary::default();
    let mut report: BTreeMap<String, TaskBuildReport> = BTreeMap::new();
    let mut per_style_lines: BTreeMap<ExplanationStyle, Vec<String>> = BTreeMap::new();

    for t in &cfg.tasks {
        let (task, split) = run.split(t)?;
        let train = &split.train;
        run.say(format!("{}: influence over {} instances", t.id, train.len()));
        let attributions: Vec<Result<AttributionResult, ConstructionError>> =
            map_bounded(train, cfg.concurrency, |_, inst| {
                influence_all(run.backend, registry, &task, inst, 1)
            });

        let mut tr = TaskBuildReport {
            instances: train.len(),
            ..Default::default()
        };
        let mut failed_ids: Vec<&str> = Vec::new();
        let mut cf_rejections: BTreeMap<&str, FillRejection> = BTreeMap::new();
        for (inst, a) in train.iter().zip(&attributions) {
            match a {
                Ok(a) => tr.degraded += usize::from(a.degraded),
                Err(e) => {
                    tr.influence_failed += 1;
                    failed_ids.push(&inst.id);
                    run.say(format!("{}: instance {} failed: {e}", t.id, inst.id));
                }
            }
        }

        for &style in &cfg.build.styles {
            let built: Vec<Option<Result<PseudoOutcome, ConstructionError>>> =
                map_bounded(train, cfg.concurrency, |i, inst| {
                    attributions[i]
                        .as_ref()
                        .ok()
                        .map(|a| build_pseudo(run.backend, registry, &task, inst, a, style))
                });
            let mut counts = ConstructionCounts {
                attempted: train.len(),
                failed: tr.influence_failed,
                ..Default::default()
            };
            let mut examples: Vec<TrainingExample> = Vec::new();
            for ((inst, a), b) in train.iter().zip(&attributions).zip(built) {
                let (Ok(a), Some(b)) = (a, b) else { continue };
                match b {
                    Ok(PseudoOutcome::Accepted(p)) => {
                        examples.push(assemble_example(registry, &task, inst, &a.y_hat, style, &p)?);
                        counts.accepted += 1;
                    }
                    Ok(PseudoOutcome::Rejected(fill)) => {
                        let reason = fill.rejection.unwrap_or(FillRejection::Unparseable);
                        *counts.rejected.entry(reason.as_str().to_owned()).or_default() += 1;
                        if style == ExplanationStyle::Counterfactual {
                            cf_rejections.insert(&inst.id, reason);
                        }
                    }
                    Err(e) => {
                        counts.failed += 1;
                        if !failed_ids.contains(&inst.id.as_str()) {
                            failed_ids.push(&inst.id);
                        }
                        run.say(format!("{}: {} construction for {} failed: {e}", t.id, style, inst.id));
                    }
                }
            }
            let lines: Vec<String> = examples.iter().map(example_line).collect();
            out.lines(&format!("{}/train_{}.jsonl", t.id, style.as_str()), "training", &lines)?;
            per_style_lines.entry(style).or_default().extend(lines);
            run.say(format!(
                "{}: {} accepted {} of {}",
                t.id, style, counts.accepted, counts.attempted
            ));
            tr.styles.insert(style.as_str().to_owned(), counts);
        }

        let log: Vec<AttributionLogRecord> = train
            .iter()
            .zip(&attributions)
            .filter_map(|(inst, a)| {
                a.as_ref()
                    .ok()
                    .map(|a| AttributionLogRecord::new(a, cf_rejections.get(inst.id.as_str()).copied()))
            })
            .collect();
        out.jsonl(&format!("{}/attribution_log.jsonl", t.id), "attribution_log", &log)?;
        summary.add(train.len(), failed_ids.len());
        report.insert(t.id.clone(), tr);
    }

    if let Some(path) = &cfg.build.passthrough {
        let mut passthrough = load_passthrough(path)?;
        if let Some(k) = cfg.build.passthrough_size {
            if k > passthrough.len() {
                bail!(
                    "passthrough_size {k} exceeds the {} records in {}",
                    passthrough.len(),
                    path.display()
                );
            }
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
            passthrough.shuffle(&mut rng);
            passthrough.truncate(k);
        }
        for (style, lines) in &per_style_lines {
            let mixed = mix_records(lines.clone(), passthrough.clone(), cfg.seed);
            out.lines(&format!("mixed_{}.jsonl", style.as_str()), "training_mixed", &mixed)?;
        }
    }

    out.json("construction_report.json", "construction_report", &report)?;
    check_total_failure(&summary, "instance")?;
    let counts = serde_json::to_value(&report)?;
    run.finish("build-dataset", started, out, counts)?;
    Ok(summary)
}

fn report_name(task: &str, style: ExplanationStyle, mode: WordMode) -> String {
    format!("{task}__{}__{}", style.as_str(), mode.as_str())
}

pub fn cmd_evaluate(run: &Run<'_>) -> Result<RunSummary> {
    let started = unix_now();
    let cfg = &run.loaded.config;
    let ev_cfg = &cfg.evaluate;
    let mut out = run.outputs("evaluate");
    let mut summary = RunSummary::default();
    let mut counts = BTreeMap::new();

    for t in &cfg.tasks {
        let (task, split) = run.split(t)?;
        for &style in &ev_cfg.styles {
            let evaluator = Evaluator::new(&run.loaded.registry, &task, style, ev_cfg.word_mode, ev_cfg.n)?
                .with_concurrency(cfg.concurrency);
            let result = evaluator.evaluate(run.backend, &split.test);
            let name = report_name(&t.id, style, ev_cfg.word_mode);
            out.json(
                &format!("reports/{}/{name}.json", ev_cfg.train_tag),
                "report",
                &result.report,
            )?;
            out.jsonl(
                &format!("traces/{}/{name}.jsonl", ev_cfg.train_tag),
                "trace",
                &result.traces,
            )?;
            let r = &result.report;
            run.say(format!(
                "{name}: score {} (retained {} of {}, failed {})",
                r.score.map_or("n/a".to_owned(), |s| format!("{s:.3}")),
                r.counts.retained,
                r.counts.total,
                r.counts.failed
            ));
            summary.add(r.counts.total, r.counts.failed);
            counts.insert(name, result.report.counts);
        }
    }

    write_matrices(run, &mut out)?;
    check_total_failure(&summary, "instance")?;
    run.finish("evaluate", started, out, serde_json::to_value(&counts)?)?;
    Ok(summary)
}

/// Every report under `reports/<tag>/`, keyed by tag.
fn collect_reports(root: &Path) -> Result<Vec<(String, EvaluationReport)>> {
    let mut found = Vec::new();
    let dir = root.join("reports");
    let Ok(tags) = fs::read_dir(&dir) else {
        return Ok(found);
    };
    let mut tag_dirs: Vec<PathBuf> = tags
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    tag_dirs.sort();
    for tag_dir in tag_dirs {
        let tag = tag_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_owned();
        let mut files: Vec<PathBuf> = fs::read_dir(&tag_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        files.sort();
        for f in files {
            let text = fs::read_to_string(&f)?;
            let report: EvaluationReport =
                serde_json::from_str(&text).with_context(|| format!("reading report {}", f.display()))?;
            found.push((tag.clone(), report));
        }
    }
    Ok(found)
}

/// Task matrices (gain over the baseline, one per style) and style
/// matrices (raw scores, one per task) from all reports written so far.
fn write_matrices(run: &Run<'_>, out: &mut Outputs) -> Result<()> {
    let baseline = &run.loaded.config.evaluate.baseline_tag;
    let reports = collect_reports(&out.root)?;

    let mut by_style: BTreeMap<(ExplanationStyle, WordMode), Vec<MatrixEntry>> = BTreeMap::new();
    let mut by_task: BTreeMap<(String, WordMode), Vec<MatrixEntry>> = BTreeMap::new();
    for (tag, r) in &reports {
        by_style
            .entry((r.style, r.word_mode))
            .or_default()
            .push(MatrixEntry::new(tag, &r.task, r));
        by_task
            .entry((r.task.clone(), r.word_mode))
            .or_default()
            .push(MatrixEntry::new(tag, r.style.as_str(), r));
    }
    for ((style, mode), entries) in by_style {
        match cross_matrix(MatrixKind::Gain, baseline, &entries) {
            Ok(m) => {
                let rel = format!("matrices/task_gain__{}__{}.csv", style.as_str(), mode.as_str());
                out.text(&rel, "matrix", &m.to_csv())?;
            }
            Err(e) => run.say(format!("skipping task matrix for {style}: {e}")),
        }
    }
    for ((task, mode), entries) in by_task {
        match cross_matrix(MatrixKind::Raw, baseline, &entries) {
            Ok(m) => {
                let rel = format!("matrices/style_raw__{task}__{}.csv", mode.as_str());
                out.text(&rel, "matrix", &m.to_csv())?;
            }
            Err(e) => run.say(format!("skipping style matrix for {task}: {e}")),
        }
    }
    Ok(())
}

pub fn cmd_validate_dataset(run: &Run<'_>) -> Result<RunSummary> {
    let started = unix_now();
    let cfg = &run.loaded.config;
    let mut out = run.outputs("validate-dataset");
    let mut summary = RunSummary::default();
    let mut counts = BTreeMap::new();

    for t in &cfg.tasks {
        let (task, split) = run.split(t)?;
        let n = cfg.validate.sample_size.unwrap_or(split.train.len());
        if n > split.train.len() {
            bail!(
                "validate.sample_size {n} exceeds the training split of {} for {}",
                split.train.len(),
                t.id
            );
        }
        let sample: Vec<LabeledInstance> = split.train[..n].to_vec();
        for &style in &cfg.validate.styles {
            let evaluator = Evaluator::new(&run.loaded.registry, &task, style, WordMode::OneWord, None)?
                .with_concurrency(cfg.concurrency);
            let report = validate_dataset(run.backend, &evaluator, &sample);
            let fmt = |s: Option<f64>| s.map_or("n/a (n=0)".to_owned(), |s| format!("{s:.3}"));
            println!(
                "{}\t{}\toriginal {} (n={})\tconstructed {} (n={})",
                t.id,
                style,
                fmt(report.original.score),
                report.original.counts.retained,
                fmt(report.constructed.score),
                report.constructed.counts.retained
            );
            let failed = report.original.counts.failed + report.constructed.counts.failed + report.construction.failed;
            summary.add(2 * n, failed);
            let name = format!("{}__{}", t.id, style.as_str());
            out.json(&format!("{name}.json"), "validation_report", &report)?;
            counts.insert(
                name,
                json!({"original": report.original.counts, "constructed": report.constructed.counts}),
            );
        }
    }
    check_total_failure(&summary, "instance")?;
    run.finish("validate-dataset", started, out, serde_json::to_value(&counts)?)?;
    Ok(summary)
}

/// Read traces and count lemmas in their faithful explanations.
pub fn cmd_analyze(paths: &[PathBuf], k: usize) -> Result<Vec<(String, usize)>> {
    if paths.is_empty() {
        bail!("no trace files given");
    }
    let mut explanations = Vec::new();
    let mut records = 0;
    for path in paths {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let trace: InstanceTrace =
                serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
            records += 1;
            if trace.retained && trace.faithful == Some(true) {
                if let Some(e) = trace.counted() {
                    explanations.push(e);
                }
            }
        }
    }
    if records == 0 {
        bail!("trace files hold no records");
    }
    Ok(top_frequent_words(&explanations, k))
}
