//! Hyperparameter sweeps and the label-noise benchmark. Cells run in
//! parallel; results are assembled in a fixed order.

use std::fmt::Write as _;
use std::io::Write;

use adadf_core::config::{Method, RunConfig};
use adadf_core::trainer;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::args::{AblateArgs, Axis, NoiseBenchArgs};
use crate::{artifacts, CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis_value: f64,
    pub best_test_acc: f64,
    pub epoch: u32,
}

fn with_axis(base: &RunConfig, axis: Axis, value: f64) -> Result<RunConfig> {
    let mut cfg = base.clone();
    match axis {
        Axis::WMin => cfg.w_min = value,
        Axis::T => cfg.t = value,
        Axis::Beta => {
            if value.fract() != 0.0 || value < 1.0 || value > u32::MAX as f64 {
                return Err(CliError::Usage(format!("beta values must be positive integers, got {value}")));
            }
            cfg.beta = value as u32;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One run per value, ordered by value.
pub fn ablate(base: &RunConfig, axis: Axis, values: &[f64]) -> Result<Vec<AblationRow>> {
    if values.len() < 2 {
        return Err(CliError::Usage("ablation needs at least 2 values".into()));
    }
    let mut values = values.to_vec();
    values.sort_by(f64::total_cmp);
    let cells = values
        .iter()
        .map(|&v| with_axis(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    cells
        .par_iter()
        .zip(values.par_iter())
        .map(|(cfg, &v)| {
            let run = trainer::run(cfg)?;
            Ok(AblationRow {
                axis_value: v,
                best_test_acc: run.record.best_test_acc,
                epoch: run.record.best_epoch,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("axis_value,best_test_acc,epoch\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.axis_value, r.best_test_acc, r.epoch).unwrap();
    }
    s
}

pub fn cmd_ablate<W: Write>(args: AblateArgs, out: &mut W) -> Result<()> {
    let cfg = args.config.effective()?;
    let rows = ablate(&cfg, args.axis, &args.values)?;
    artifacts::emit(args.out.as_deref(), &ablation_csv(&rows), &cfg, out)
}

/// Best-epoch test accuracy of both methods for one rate and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCell {
    pub rate: f64,
    pub seed: u64,
    pub baseline_acc: f64,
    pub adadf_acc: f64,
}

/// Seed-averaged accuracies at one rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub rate: f64,
    pub baseline_acc: f64,
    pub adadf_acc: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBench {
    pub rows: Vec<NoiseRow>,
    pub cells: Vec<NoiseCell>,
}

pub fn noise_bench(base: &RunConfig, rates: &[f64], seeds: &[u64]) -> Result<NoiseBench> {
    if let Some(r) = rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(CliError::Usage(format!("noise rates must lie in [0, 1), got {r}")));
    }
    if rates.is_empty() || seeds.is_empty() {
        return Err(CliError::Usage("noise-bench needs at least one rate and one seed".into()));
    }
    let mut jobs = Vec::new();
    for &rate in rates {
        for &seed in seeds {
            for method in [Method::Baseline, Method::Adadf] {
                let cfg = RunConfig {
                    seed,
                    noise_rate: rate,
                    method,
                    ..base.clone()
                };
                cfg.validate()?;
                jobs.push(cfg);
            }
        }
    }
    let accs = jobs
        .par_iter()
        .map(|cfg| Ok(trainer::run(cfg)?.record.best_test_acc))
        .collect::<Result<Vec<f64>>>()?;

    let mut cells = Vec::new();
    let mut rows = Vec::new();
    let mut pairs = accs.chunks(2);
    for &rate in rates {
        let start = cells.len();
        for &seed in seeds {
            let pair = pairs.next().expect("one pair per cell");
            cells.push(NoiseCell {
                rate,
                seed,
                baseline_acc: pair[0],
                adadf_acc: pair[1],
            });
        }
        let n = seeds.len() as f64;
        let group = &cells[start..];
        let baseline_acc = group.iter().map(|c| c.baseline_acc).sum::<f64>() / n;
        let adadf_acc = group.iter().map(|c| c.adadf_acc).sum::<f64>() / n;
        rows.push(NoiseRow {
            rate,
            baseline_acc,
            adadf_acc,
            delta: adadf_acc - baseline_acc,
        });
    }
    Ok(NoiseBench { rows, cells })
}

pub fn noise_csv(rows: &[NoiseRow]) -> String {
    let mut s = String::from("rate,baseline_acc,adadf_acc,delta\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.rate, r.baseline_acc, r.adadf_acc, r.delta).unwrap();
    }
    s
}

pub fn cmd_noise_bench<W: Write>(args: NoiseBenchArgs, out: &mut W) -> Result<()> {
    let cfg = args.config.effective()?;
    let seeds = args.seeds.clone().unwrap_or_else(|| vec![cfg.seed]);
    let bench = noise_bench(&cfg, &args.rates, &seeds)?;
    artifacts::emit(args.out.as_deref(), &noise_csv(&bench.rows), &cfg, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_axis_rejects_fractions() {
        let base = RunConfig::default();
        assert!(matches!(with_axis(&base, Axis::Beta, 2.5), Err(CliError::Usage(_))));
        assert_eq!(with_axis(&base, Axis::Beta, 5.0).unwrap().beta, 5);
    }

    #[test]
    fn axis_values_are_validated() {
        let base = RunConfig::default();
        let err = with_axis(&base, Axis::WMin, 1.5).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("w_min"));
    }

    #[test]
    fn csv_layouts() {
        let rows = [AblationRow {
            axis_value: 0.2,
            best_test_acc: 0.75,
            epoch: 3,
        }];
        assert_eq!(ablation_csv(&rows), "axis_value,best_test_acc,epoch\n0.2,0.75,3\n");
        let rows = [NoiseRow {
            rate: 0.1,
            baseline_acc: 0.5,
            adadf_acc: 0.75,
            delta: 0.25,
        }];
        assert_eq!(noise_csv(&rows), "rate,baseline_acc,adadf_acc,delta\n0.1,0.5,0.75,0.25\n");
    }

    #[test]
    fn rates_outside_unit_interval_are_usage_errors() {
        let err = noise_bench(&RunConfig::default(), &[1.0], &[0]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
