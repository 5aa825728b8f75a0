use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use faithcheck_core::backend::{ExplanationPolicy, FillPolicy, HttpConfig};
use faithcheck_core::corpus::CorpusFormat;
use faithcheck_core::prompts::{builtin_registry, ExplanationStyle, PromptRegistry, Style, WordMode};
use serde::Deserialize;

fn default_concurrency() -> usize {
    4
}

fn default_tag() -> String {
    "untrained".to_owned()
}

fn all_styles() -> Vec<ExplanationStyle> {
    ExplanationStyle::ALL.to_vec()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Prompt registry file replacing the bundled one.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    pub backend: BackendConfig,
    pub tasks: Vec<TaskConfig>,
    #[serde(default)]
    pub build: BuildConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub validate: ValidateConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Lexicon {
        lexicon: PathBuf,
        #[serde(default)]
        policy: Option<ExplanationPolicy>,
        #[serde(default)]
        fill_policy: Option<FillPolicy>,
    },
    Http(HttpConfig),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub id: String,
    pub corpus: PathBuf,
    /// Inferred from the corpus extension when absent.
    #[serde(default)]
    pub format: Option<String>,
    pub train_size: usize,
    pub test_size: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildConfig {
    #[serde(default = "all_styles")]
    pub styles: Vec<ExplanationStyle>,
    /// Instruction-tuning jsonl mixed into the per-style training files.
    #[serde(default)]
    pub passthrough: Option<PathBuf>,
    /// How many passthrough records to mix in; all when absent.
    #[serde(default)]
    pub passthrough_size: Option<usize>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            styles: all_styles(),
            passthrough: None,
            passthrough_size: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    #[serde(default = "all_styles")]
    pub styles: Vec<ExplanationStyle>,
    #[serde(default = "one_word")]
    pub word_mode: WordMode,
    /// Required explanation size; one-word mode implies 1.
    #[serde(default)]
    pub n: Option<usize>,
    /// Label for the model being evaluated, e.g. what it was trained on.
    #[serde(default = "default_tag")]
    pub train_tag: String,
    /// Tag whose reports serve as the matrix baseline.
    #[serde(default = "default_tag")]
    pub baseline_tag: String,
}

fn one_word() -> WordMode {
    WordMode::OneWord
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            styles: all_styles(),
            word_mode: WordMode::OneWord,
            n: None,
            train_tag: default_tag(),
            baseline_tag: default_tag(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    #[serde(default = "all_styles")]
    pub styles: Vec<ExplanationStyle>,
    /// Instances drawn from the training split; the whole split when absent.
    #[serde(default)]
    pub sample_size: Option<usize>,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            styles: all_styles(),
            sample_size: None,
        }
    }
}

/// A parsed config plus what it was read from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub path: PathBuf,
    pub raw: String,
    pub registry: PromptRegistry,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig =
            toml::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        let registry = match &config.templates {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading templates {}", p.display()))?;
                PromptRegistry::from_toml_str(&text).with_context(|| format!("loading templates {}", p.display()))?
            }
            None => builtin_registry(),
        };
        config.validate(&registry)?;
        Ok(Self {
            config,
            path: path.to_owned(),
            raw,
            registry,
        })
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Make relative paths relative to the config file's directory.
    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output_dir);
        if let Some(t) = &mut self.templates {
            resolve(base, t);
        }
        if let BackendConfig::Lexicon { lexicon, .. } = &mut self.backend {
            resolve(base, lexicon);
        }
        for t in &mut self.tasks {
            resolve(base, &mut t.corpus);
        }
        if let Some(p) = &mut self.build.passthrough {
            resolve(base, p);
        }
    }

    pub fn validate(&self, registry: &PromptRegistry) -> Result<()> {
        if self.tasks.is_empty() {
            bail!("config lists no tasks");
        }
        if self.concurrency == 0 {
            bail!("concurrency must be at least 1");
        }
        let mut seen = Vec::new();
        for t in &self.tasks {
            if seen.contains(&&t.id) {
                bail!("task {} listed twice", t.id);
            }
            seen.push(&t.id);
            registry.task(&t.id).with_context(|| format!("task {}", t.id))?;
            t.corpus_format()?;
            for style in &self.build.styles {
                registry.get(&t.id, (*style).into(), WordMode::OneWord)?;
            }
            if self.build.styles.contains(&ExplanationStyle::Counterfactual) {
                registry.get(&t.id, Style::CfFill, WordMode::NotApplicable)?;
            }
            for style in &self.evaluate.styles {
                registry.get(&t.id, (*style).into(), self.evaluate.word_mode)?;
            }
            for style in &self.validate.styles {
                registry.get(&t.id, (*style).into(), WordMode::OneWord)?;
            }
        }
        if self.evaluate.word_mode == WordMode::NotApplicable {
            bail!("evaluate.word_mode must be one_word or multi_word");
        }
        if self.evaluate.word_mode == WordMode::OneWord && self.evaluate.n.is_some_and(|n| n != 1) {
            bail!("evaluate.n must be 1 in one_word mode");
        }
        for tag in [&self.evaluate.train_tag, &self.evaluate.baseline_tag] {
            if tag.is_empty() || tag.contains(['/', '\\']) || tag.starts_with('.') {
                bail!("tag {tag:?} must be a plain file-name component");
            }
        }
        Ok(())
    }
}

impl TaskConfig {
    pub fn corpus_format(&self) -> Result<CorpusFormat> {
        let name = match &self.format {
            Some(f) => f.clone(),
            None => self
                .corpus
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_owned)
                .with_context(|| format!("cannot infer format of {}", self.corpus.display()))?,
        };
        name.parse().map_err(|e| anyhow::anyhow!("task {}: {e}", self.id))
    }
}
