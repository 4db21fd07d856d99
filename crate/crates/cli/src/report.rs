//! Plot-ready outputs from a training run directory: the final class table,
//! per-sample fusion traces, and a JSON summary.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;

use adadf_core::config::RunConfig;
use adadf_core::distribution::{class_names, ClassDistributionTable, RowSource};
use adadf_core::trainer::{EpochMetrics, FusionTrace};
use serde::Serialize;

use crate::args::ReportArgs;
use crate::artifacts::{self, MetricsLine, RunSummary, TableLine, TraceLine};
use crate::{CliError, Result};

pub const CLASS_TABLE_CSV: &str = "class_table.csv";
pub const FUSION_TRACE_CSV: &str = "fusion_trace.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Per-epoch scalars of the summary; per-step losses are left in the log.
#[derive(Debug, Serialize)]
pub struct EpochLine {
    pub epoch: u32,
    pub train_acc: f64,
    pub test_acc: f64,
    pub l_ce: f64,
    pub l_kld: f64,
    pub l_rr: f64,
    pub l_total: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub lr: f64,
}

impl From<&EpochMetrics> for EpochLine {
    fn from(m: &EpochMetrics) -> Self {
        Self {
            epoch: m.epoch,
            train_acc: m.train_acc,
            test_acc: m.test_acc,
            l_ce: m.l_ce,
            l_kld: m.l_kld,
            l_rr: m.l_rr,
            l_total: m.l_total,
            alpha1: m.alpha1,
            alpha2: m.alpha2,
            lr: m.lr,
        }
    }
}

/// Contents of `summary.json`.
#[derive(Debug, Serialize)]
pub struct Summary {
    pub config: RunConfig,
    #[serde(flatten)]
    pub run: RunSummary,
    pub final_table_epoch: u32,
    pub final_table_sources: Vec<RowSource>,
    pub epochs: Vec<EpochLine>,
}

pub fn class_table_csv(table: &ClassDistributionTable) -> String {
    let mut buf = Vec::new();
    table
        .write_csv(&class_names(table.num_classes()), &mut buf)
        .expect("writing to memory");
    String::from_utf8(buf).expect("CSV is UTF-8")
}

pub fn fusion_trace_csv(traces: &[FusionTrace], num_classes: usize) -> String {
    let mut s = String::from("epoch,sample,index,label,w");
    for prefix in ["d_label", "table_row", "d_fused"] {
        for c in 0..num_classes {
            write!(s, ",{prefix}_{c}").unwrap();
        }
    }
    s.push('\n');
    for t in traces {
        write!(s, "{},{},{},{},{}", t.epoch, t.sample, t.index, t.label, t.w).unwrap();
        for v in [&t.d_label, &t.table_row, &t.d_fused] {
            for x in v.as_slice() {
                write!(s, ",{x}").unwrap();
            }
        }
        s.push('\n');
    }
    s
}

fn split_config<T>(path: &std::path::Path, lines: Vec<T>, config_of: fn(&T) -> Option<&RunConfig>) -> Result<(RunConfig, Vec<T>)> {
    let mut iter = lines.into_iter();
    let first = iter.next();
    match first.as_ref().and_then(config_of) {
        Some(cfg) => Ok((cfg.clone(), iter.collect())),
        None => Err(CliError::Usage(format!(
            "run artifact {} does not start with a config record",
            path.display()
        ))),
    }
}

pub fn cmd_report<W: Write>(args: ReportArgs, out: &mut W) -> Result<()> {
    let run = &args.run;
    let metrics_path = run.join(artifacts::METRICS_FILE);
    let tables_path = run.join(artifacts::TABLES_FILE);
    let trace_path = run.join(artifacts::TRACE_FILE);

    let (config, metrics) = split_config(&metrics_path, artifacts::read_jsonl::<MetricsLine>(&metrics_path)?, |l| match l {
        MetricsLine::Config { config } => Some(config),
        _ => None,
    })?;
    let (_, tables) = split_config(&tables_path, artifacts::read_jsonl::<TableLine>(&tables_path)?, |l| match l {
        TableLine::Config { config } => Some(config),
        _ => None,
    })?;
    let (_, traces) = split_config(&trace_path, artifacts::read_jsonl::<TraceLine>(&trace_path)?, |l| match l {
        TraceLine::Config { config } => Some(config),
        _ => None,
    })?;

    let mut epochs = Vec::new();
    let mut summary = None;
    for line in metrics {
        match line {
            MetricsLine::Epoch(m) => epochs.push(m),
            MetricsLine::Summary(s) => summary = Some(s),
            MetricsLine::Config { .. } => {}
        }
    }
    let summary = summary.ok_or_else(|| {
        CliError::Usage(format!("run artifact {} has no summary record", metrics_path.display()))
    })?;
    let table = tables
        .into_iter()
        .filter_map(|l| match l {
            TableLine::Table(t) => Some(t),
            TableLine::Config { .. } => None,
        })
        .next_back()
        .ok_or_else(|| CliError::Usage(format!("run artifact {} holds no class table", tables_path.display())))?;
    let traces: Vec<FusionTrace> = traces
        .into_iter()
        .filter_map(|l| match l {
            TraceLine::Trace(t) => Some(t),
            TraceLine::Config { .. } => None,
        })
        .collect();

    let selected = match &args.samples {
        None => traces,
        Some(wanted) => {
            let mut traced: Vec<usize> = traces.iter().map(|t| t.sample).collect();
            traced.sort_unstable();
            traced.dedup();
            if let Some(bad) = wanted.iter().find(|s| traced.binary_search(s).is_err()) {
                return Err(CliError::Usage(format!(
                    "sample index {bad} is out of range: traced samples are {traced:?}"
                )));
            }
            traces.into_iter().filter(|t| wanted.contains(&t.sample)).collect()
        }
    };

    let dir = args.out.clone().unwrap_or_else(|| run.join("report"));
    fs::create_dir_all(&dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(CliError::io(format!("writing {}", p.display())))
    };
    write(CLASS_TABLE_CSV, &class_table_csv(&table))?;
    write(FUSION_TRACE_CSV, &fusion_trace_csv(&selected, table.num_classes()))?;
    let report = Summary {
        config: config.clone(),
        run: summary,
        final_table_epoch: table.epoch,
        final_table_sources: table.sources.clone(),
        epochs: epochs.iter().map(EpochLine::from).collect(),
    };
    let mut json = serde_json::to_string_pretty(&report).expect("summary serializes");
    json.push('\n');
    write(SUMMARY_JSON, &json)?;
    write(artifacts::CONFIG_FILE, &config.to_toml())?;
    writeln!(out, "report written to {}", dir.display()).map_err(CliError::io("writing to stdout"))
}
