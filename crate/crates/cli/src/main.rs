use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use faithcheck_cli::config::BackendConfig;
use faithcheck_cli::{
    cmd_analyze, cmd_build_dataset, cmd_evaluate, cmd_validate_dataset, exit_code, make_backend, BackendFailure,
    LoadedConfig, Run, RunSummary, EXIT_CONFIG, EXIT_OK,
};

#[derive(Parser)]
#[command(name = "faithcheck", version, about = "Build and evaluate self-explanation datasets")]
struct Cli {
    /// Suppress progress messages on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Construct pseudo-faithful training files from each task's training split.
    BuildDataset {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare faithfulness of generated and constructed explanations.
    ValidateDataset {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score self-explanations on each task's test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Most frequent lemmas in faithful explanations.
    Analyze {
        /// Trace files written by `evaluate`.
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long = "top", default_value_t = 10)]
        k: usize,
    },
}

fn with_config(path: &Path, quiet: bool, f: fn(&Run<'_>) -> Result<RunSummary>) -> Result<RunSummary> {
    let loaded = LoadedConfig::load(path)?;
    let backend = make_backend(&loaded.config.backend).map_err(|e| match loaded.config.backend {
        BackendConfig::Http(_) => BackendFailure(format!("{e:#}")).into(),
        BackendConfig::Lexicon { .. } => e,
    })?;
    f(&Run {
        loaded: &loaded,
        backend: backend.as_ref(),
        quiet,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::BuildDataset { config } => with_config(config, cli.quiet, cmd_build_dataset),
        Command::ValidateDataset { config } => with_config(config, cli.quiet, cmd_validate_dataset),
        Command::Evaluate { config } => with_config(config, cli.quiet, cmd_evaluate),
        Command::Analyze { traces, k } => {
            return match cmd_analyze(traces, *k) {
                Ok(rows) if rows.is_empty() => {
                    eprintln!("no faithful explanations found");
                    ExitCode::from(EXIT_OK as u8)
                }
                Ok(rows) => {
                    println!("lemma\tcount");
                    for (lemma, count) in rows {
                        println!("{lemma}\t{count}");
                    }
                    ExitCode::from(EXIT_OK as u8)
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(EXIT_CONFIG as u8)
                }
            };
        }
    };
    let code = exit_code(&result);
    match &result {
        Ok(s) if s.partial() => eprintln!("{} of {} instances failed", s.failed, s.total),
        Ok(_) => {}
        Err(e) => eprintln!("error: {e:#}"),
    }
    ExitCode::from(code as u8)
}
