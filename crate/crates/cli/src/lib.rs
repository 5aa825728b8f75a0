//! Command implementations behind the `faithcheck` binary.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{
    cmd_analyze, cmd_build_dataset, cmd_evaluate, cmd_validate_dataset, make_backend, BackendFailure, Run, RunSummary,
};
pub use config::LoadedConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_BACKEND: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

/// Exit code for a finished or failed run.
pub fn exit_code(result: &anyhow::Result<RunSummary>) -> i32 {
    match result {
        Ok(s) if s.partial() => EXIT_PARTIAL,
        Ok(_) => EXIT_OK,
        Err(e) if e.downcast_ref::<BackendFailure>().is_some() => EXIT_BACKEND,
        Err(_) => EXIT_CONFIG,
    }
}
