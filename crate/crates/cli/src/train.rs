use std::io::Write;

use adadf_core::config::RunConfig;
use adadf_core::data::Split;
use adadf_core::network::DualBranchModel;
use adadf_core::trainer::{self, RunOutput};

use crate::args::{EvalArgs, SplitArg, TrainArgs};
use crate::artifacts::{self, RunSummary};
use crate::{CliError, Result};

/// Runs training and writes every artifact into `dir`.
pub fn train_to_dir(cfg: &RunConfig, dir: &std::path::Path) -> Result<(RunSummary, RunOutput)> {
    let run = trainer::run(cfg)?;
    artifacts::write_run(dir, cfg, &run)?;
    Ok((RunSummary::from(&run.record), run))
}

pub fn cmd_train<W: Write>(args: TrainArgs, out: &mut W) -> Result<()> {
    let cfg = args.config.effective()?;
    let (summary, _) = train_to_dir(&cfg, &args.out)?;
    write!(out, "{}", cfg.to_toml()).map_err(CliError::io("writing to stdout"))?;
    writeln!(
        out,
        "best_test_acc={} epoch={}",
        summary.best_test_acc, summary.best_epoch
    )
    .map_err(CliError::io("writing to stdout"))
}

pub fn cmd_eval<W: Write>(args: EvalArgs, out: &mut W) -> Result<()> {
    let (model, meta) = DualBranchModel::load(&args.checkpoint).map_err(|e| match e {
        adadf_core::Error::Io(io) => {
            CliError::Usage(format!("cannot read checkpoint {}: {io}", args.checkpoint.display()))
        }
        other => other.into(),
    })?;
    let mut cfg = match (&args.config, meta.trim().is_empty()) {
        (Some(p), _) => crate::load_config(Some(p))?,
        (None, false) => RunConfig::from_toml(&meta)?,
        (None, true) => RunConfig::default(),
    };
    args.overrides.apply(&mut cfg);
    cfg.validate()?;
    let ds = trainer::prepare_dataset(&cfg)?;
    if ds.feature_dim() != model.config.input_dim || ds.num_classes != model.config.num_classes {
        return Err(CliError::Usage(format!(
            "checkpoint expects {} features and {} classes, dataset has {} and {}",
            model.config.input_dim,
            model.config.num_classes,
            ds.feature_dim(),
            ds.num_classes
        )));
    }
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let acc = trainer::evaluate(&model, &ds, split)?;
    writeln!(
        out,
        "accuracy={acc} split={} n={}",
        split.as_str(),
        ds.indices(split).len()
    )
    .map_err(CliError::io("writing to stdout"))
}
