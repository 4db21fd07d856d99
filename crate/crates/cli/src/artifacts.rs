//! Files written by `adadf train` and read back by `adadf report`.
//!
//! Every JSON-lines file opens with a `{"kind":"config", ...}` record holding
//! the effective run configuration.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use adadf_core::config::RunConfig;
use adadf_core::distribution::ClassDistributionTable;
use adadf_core::trainer::{EpochMetrics, FusionTrace, MetricsRecord, RunOutput};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TABLES_FILE: &str = "class_tables.jsonl";
pub const TRACE_FILE: &str = "fusion_trace.jsonl";
pub const CONFIG_FILE: &str = "effective_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub initial_test_acc: f64,
    pub best_test_acc: f64,
    pub best_epoch: u32,
    pub final_test_acc: f64,
    pub epochs_completed: u32,
}

impl From<&MetricsRecord> for RunSummary {
    fn from(r: &MetricsRecord) -> Self {
        Self {
            initial_test_acc: r.initial_test_acc,
            best_test_acc: r.best_test_acc,
            best_epoch: r.best_epoch,
            final_test_acc: r.final_test_acc,
            epochs_completed: r.epochs.len() as u32,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsLine {
    Config { config: RunConfig },
    Epoch(EpochMetrics),
    Summary(RunSummary),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TableLine {
    Config { config: RunConfig },
    Table(ClassDistributionTable),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceLine {
    Config { config: RunConfig },
    Trace(FusionTrace),
}

fn write_jsonl<T: Serialize>(path: &Path, lines: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = Vec::new();
    for line in lines {
        serde_json::to_writer(&mut buf, &line).expect("artifact lines serialize");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(CliError::io(format!("writing {}", path.display())))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Usage(format!("missing run artifact {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(CliError::io(format!("reading {}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| {
            CliError::Usage(format!("malformed run artifact {}, line {}: {e}", path.display(), k + 1))
        })?;
        out.push(value);
    }
    Ok(out)
}

/// Writes all training artifacts into `dir`, creating it if needed.
pub fn write_run(dir: &Path, cfg: &RunConfig, run: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
    let config_toml = cfg.to_toml();
    fs::write(dir.join(CONFIG_FILE), &config_toml)
        .map_err(CliError::io(format!("writing {}", dir.join(CONFIG_FILE).display())))?;

    let header = || MetricsLine::Config { config: cfg.clone() };
    let metrics = std::iter::once(header())
        .chain(run.record.epochs.iter().cloned().map(MetricsLine::Epoch))
        .chain(std::iter::once(MetricsLine::Summary(RunSummary::from(&run.record))));
    write_jsonl(&dir.join(METRICS_FILE), metrics)?;

    let tables = std::iter::once(TableLine::Config { config: cfg.clone() })
        .chain(run.tables.iter().cloned().map(TableLine::Table));
    write_jsonl(&dir.join(TABLES_FILE), tables)?;

    let traces = std::iter::once(TraceLine::Config { config: cfg.clone() })
        .chain(run.traces.iter().cloned().map(TraceLine::Trace));
    write_jsonl(&dir.join(TRACE_FILE), traces)?;

    run.model.save(&dir.join(CHECKPOINT_FILE), &config_toml)?;
    Ok(())
}

/// Writes `text` to `path`, or to `out` when no path is given. A file
/// destination also gets a `<path>.config.toml` sidecar.
pub fn emit<W: Write>(path: Option<&Path>, text: &str, cfg: &RunConfig, out: &mut W) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(CliError::io(format!("creating {}", parent.display())))?;
            }
            fs::write(p, text).map_err(CliError::io(format!("writing {}", p.display())))?;
            let sidecar = sidecar_path(p);
            fs::write(&sidecar, cfg.to_toml()).map_err(CliError::io(format!("writing {}", sidecar.display())))
        }
        None => out
            .write_all(text.as_bytes())
            .map_err(CliError::io("writing to stdout")),
    }
}

pub fn sidecar_path(p: &Path) -> std::path::PathBuf {
    let mut name = p.file_name().unwrap_or_default().to_os_string();
    name.push(".config.toml");
    p.with_file_name(name)
}
