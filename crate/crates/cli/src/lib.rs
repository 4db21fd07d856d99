//! `adadf` command-line runner: training, evaluation, ablation grids, noise
//! benchmarks and plot-ready reports.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::io::Write;
use std::path::{Path, PathBuf};

use adadf_core::config::RunConfig;

pub mod args;
pub mod artifacts;
pub mod grid;
pub mod report;
pub mod train;

pub use args::{Cli, Command};

/// Relative `--config` paths are resolved against this directory when set.
pub const CONFIG_DIR_ENV: &str = "ADADF_CONFIG_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] adadf_core::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(adadf_core::Error::Config { .. }) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn resolve_config_path(path: &Path) -> PathBuf {
    match std::env::var_os(CONFIG_DIR_ENV) {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

/// Reads the config file, or starts from defaults when none is given.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let resolved = resolve_config_path(path);
    let text = std::fs::read_to_string(&resolved)
        .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", resolved.display())))?;
    RunConfig::from_toml(&text).map_err(|e| match e {
        adadf_core::Error::Config { field, message } => CliError::Core(adadf_core::Error::Config {
            field,
            message: format!("{message} (in {})", resolved.display()),
        }),
        other => other.into(),
    })
}

pub fn execute<W: Write>(cli: Cli, out: &mut W) -> Result<()> {
    match cli.command {
        Command::Train(a) => train::cmd_train(a, out),
        Command::Eval(a) => train::cmd_eval(a, out),
        Command::Ablate(a) => grid::cmd_ablate(a, out),
        Command::NoiseBench(a) => grid::cmd_noise_bench(a, out),
        Command::Report(a) => report::cmd_report(a, out),
    }
}
