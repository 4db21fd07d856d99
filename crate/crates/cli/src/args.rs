use std::path::PathBuf;

use adadf_core::config::{Method, RunConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "adadf", version, about = "Adaptive label-distribution-fusion experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write its artifacts.
    Train(TrainArgs),
    /// Accuracy of a saved checkpoint.
    Eval(EvalArgs),
    /// Sweep one hyperparameter.
    Ablate(AblateArgs),
    /// Baseline against Ada-DF under injected label noise.
    NoiseBench(NoiseBenchArgs),
    /// Tables and summaries from a training run directory.
    Report(ReportArgs),
}

/// Flags that override single `RunConfig` fields.
#[derive(Debug, Default, Clone, Args)]
pub struct Overrides {
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub w_min: Option<f64>,
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long)]
    pub beta: Option<u32>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub freeze_extractor: Option<bool>,
    #[arg(long)]
    pub noise_rate: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub trace_samples: Option<Vec<usize>>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                })*
            };
        }
        set!(
            method,
            seed,
            epochs,
            batch_size,
            lr0,
            gamma,
            w_min,
            t,
            beta,
            delta,
            ratio,
            freeze_extractor,
            noise_rate,
            trace_samples
        );
    }
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

impl ConfigArgs {
    pub fn effective(&self) -> crate::Result<RunConfig> {
        let mut cfg = crate::load_config(self.config.as_deref())?;
        self.overrides.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory receiving the run artifacts.
    #[arg(long, short, default_value = "adadf-run")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the configuration stored in the checkpoint.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    #[value(name = "w_min")]
    WMin,
    #[value(name = "t")]
    T,
    #[value(name = "beta")]
    Beta,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::WMin => "w_min",
            Axis::T => "t",
            Axis::Beta => "beta",
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum)]
    pub axis: Axis,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// CSV destination; stdout when omitted.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NoiseBenchArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    pub rates: Vec<f64>,
    /// Seeds averaged per rate; defaults to the configured seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// CSV destination; stdout when omitted.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by `adadf train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Defaults to `<run>/report`.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Training-split positions to include in the fusion trace; defaults to
    /// every traced sample.
    #[arg(long, value_delimiter = ',')]
    pub samples: Option<Vec<usize>>,
}
