//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use adadf_cli::grid::noise_bench;
use adadf_core::autodiff::{Tape, Tensor};
use adadf_core::config::{Method, RunConfig};
use adadf_core::data::Split;
use adadf_core::distribution::{
    fuse, mine_class_distributions, normalize_weights, threshold_distribution, ClassDistributionTable,
    ProbVector, RowSource,
};
use adadf_core::losses::{alpha1, alpha2, rank_regularization, RR_DELTA, RR_RATIO};
use adadf_core::network::{DualBranchModel, ModelConfig};
use adadf_core::rng;
use adadf_core::trainer::{self, joint_loss_grad_check, RunOutput};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_dist(r: &mut rng::Rng, c: usize) -> ProbVector {
    let raw: Vec<f64> = (0..c).map(|_| r.gen_range(0.0..1.0) + 1e-3).collect();
    let s: f64 = raw.iter().sum();
    ProbVector::new(raw.iter().map(|x| x / s).collect()).unwrap()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let cfg = RunConfig::default();
    for seed in 0..100u64 {
        let model = DualBranchModel::init(ModelConfig {
            input_dim: 8,
            extractor_dims: vec![8],
            branch_dims: vec![8],
            num_classes: 3,
            freeze_extractor: false,
            seed,
            attention: true,
            detach_attention_input: false,
        })
        .unwrap();
        let mut r = rng::stream(seed, 100, 0);
        let n = 8;
        let x = Tensor::new(vec![n, 8], (0..n * 8).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..3)).collect();
        let epoch = r.gen_range(1..=8);
        let table = if seed % 2 == 0 {
            ClassDistributionTable::threshold_only(3, cfg.t)
        } else {
            ClassDistributionTable {
                rows: (0..3).map(|_| random_dist(&mut r, 3)).collect(),
                sources: vec![RowSource::Mined; 3],
                epoch: 1,
            }
        };
        let err = joint_loss_grad_check(&model, &x, &labels, &table, &cfg, epoch, 1e-5).unwrap();
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("max relative error {worst:.2e} over 100 seeds in {:.1}s", elapsed.as_secs_f64()),
    )
}

fn brute_mine(dists: &[ProbVector], labels: &[usize], c: usize, t: f64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut rows = Vec::new();
    let mut mined = Vec::new();
    for class in 0..c {
        let members: Vec<&ProbVector> = dists.iter().zip(labels).filter(|(_, &y)| y == class).map(|(d, _)| d).collect();
        let mean: Vec<f64> = (0..c)
            .map(|j| members.iter().map(|d| d.as_slice()[j]).sum::<f64>() / members.len() as f64)
            .collect();
        if !members.is_empty() && mean[class] >= t {
            rows.push(mean);
            mined.push(true);
        } else {
            rows.push((0..c).map(|j| if j == class { t } else { (1.0 - t) / (c - 1) as f64 }).collect());
            mined.push(false);
        }
    }
    (rows, mined)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn distribution_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng::from_seed(2024);
    let mut failures = Vec::new();
    for case in 0..1000 {
        let c = r.gen_range(2..=7);
        let n = r.gen_range(1..=64);
        let t = r.gen_range(0.05..0.95);
        let w_min = if case % 10 == 0 { 0.0 } else { r.gen_range(0.0..0.9) };
        // Concentrated distributions so both mined and fallback rows occur.
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let dists: Vec<ProbVector> = labels
            .iter()
            .map(|&y| {
                let mut d = random_dist(&mut r, c).into_inner();
                let boost = r.gen_range(0.0..6.0);
                d[y] += boost;
                let s: f64 = d.iter().sum();
                ProbVector::new(d.iter().map(|x| x / s).collect()).unwrap()
            })
            .collect();

        let table = mine_class_distributions(&dists, &labels, c, t).unwrap();
        let (rows, mined) = brute_mine(&dists, &labels, c, t);
        for k in 0..c {
            let is_mined = table.sources[k] == RowSource::Mined;
            if is_mined != mined[k] || !close(table.row(k).as_slice(), &rows[k], 1e-12) {
                failures.push(format!("mine case {case} row {k}"));
            }
        }

        let cls = r.gen_range(0..c);
        let thre = threshold_distribution(cls, t, c);
        let brute: Vec<f64> = (0..c).map(|j| if j == cls { t } else { (1.0 - t) / (c - 1) as f64 }).collect();
        if !close(thre.as_slice(), &brute, 1e-12) || thre.as_slice()[cls] != t {
            failures.push(format!("threshold case {case}"));
        }

        let w_avg: Vec<f64> = (0..n).map(|_| r.gen_range(0.01..0.99)).collect();
        let w = normalize_weights(&w_avg, w_min).unwrap();
        let lo = w_avg.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = w_avg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let brute: Vec<f64> = if hi > lo {
            w_avg.iter().map(|x| w_min + (1.0 - w_min) * (x - lo) / (hi - lo)).collect()
        } else {
            vec![1.0; n]
        };
        if !close(&w, &brute, 1e-12) {
            failures.push(format!("normalize case {case}"));
        }

        let fused = fuse(&dists, &table, &labels, &w).unwrap();
        for i in 0..n {
            let row = table.row(labels[i]).as_slice();
            let brute: Vec<f64> = (0..c).map(|j| w[i] * row[j] + (1.0 - w[i]) * dists[i].as_slice()[j]).collect();
            if !close(fused[i].as_slice(), &brute, 1e-12) {
                failures.push(format!("fuse case {case} sample {i}"));
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && elapsed < Duration::from_secs(10),
        format!(
            "1000 instances, {} mismatches{} in {:.2}s",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default(),
            elapsed.as_secs_f64()
        ),
    )
}

fn schedule_conformance() -> Outcome {
    let mut worst = 0.0f64;
    let mut at_beta = true;
    for beta in [1u32, 3, 5, 7, 9] {
        for e in 1..=100u32 {
            let (ef, bf) = (e as f64, beta as f64);
            let a1 = if ef <= bf { 1.0 } else { (-(1.0 - bf / ef).powi(2)).exp() };
            let a2 = if ef <= bf { (-(1.0 - ef / bf).powi(2)).exp() } else { 1.0 };
            worst = worst.max((alpha1(e, beta) - a1).abs()).max((alpha2(e, beta) - a2).abs());
        }
        at_beta &= alpha1(beta, beta) == 1.0 && alpha2(beta, beta) == 1.0;
    }
    outcome(
        worst <= 1e-12 && at_beta,
        format!("max deviation {worst:.1e} over e in 1..=100, beta in {{1,3,5,7,9}}; both 1 at e = beta: {at_beta}"),
    )
}

fn rr_value(w: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let v = tape.param(Tensor::vector(w.to_vec()).unwrap());
    let l = rank_regularization(&mut tape, v, RR_DELTA, RR_RATIO).unwrap();
    tape.value(l).item()
}

fn rank_regularization_contract() -> Outcome {
    let mut r = rng::from_seed(77);
    let (mut active, mut inactive, mut bad) = (0, 0, Vec::new());
    for case in 0..1000 {
        let n = r.gen_range(2..=64);
        let center: f64 = r.gen_range(0.1..0.9);
        let spread: f64 = if case % 2 == 0 { 0.02 } else { 0.6 };
        let w: Vec<f64> = (0..n)
            .map(|_| (center + r.gen_range(-spread..spread)).clamp(1e-3, 1.0 - 1e-3))
            .collect();
        let mut sorted = w.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let m = ((RR_RATIO * n as f64 + 1e-9).floor() as usize).clamp(1, n - 1);
        let w_h = sorted[..m].iter().sum::<f64>() / m as f64;
        let w_l = sorted[m..].iter().sum::<f64>() / (n - m) as f64;
        let loss = rr_value(&w);
        if w_h - w_l >= RR_DELTA {
            inactive += 1;
            if loss != 0.0 {
                bad.push(format!("case {case}: gap {} but loss {loss}", w_h - w_l));
            }
        } else {
            active += 1;
            if loss <= 0.0 || loss.is_nan() || (loss - (RR_DELTA - (w_h - w_l))).abs() > 1e-12 {
                bad.push(format!("case {case}: gap {} loss {loss}", w_h - w_l));
            }
        }
        let mut shuffled = w.clone();
        shuffled.shuffle(&mut r);
        if rr_value(&shuffled) != loss {
            bad.push(format!("case {case}: not permutation invariant"));
        }
    }
    outcome(
        bad.is_empty() && active > 0 && inactive > 0,
        format!("1000 batches ({inactive} inactive, {active} active hinges), {} violations", bad.len()),
    )
}

struct SeedPair {
    seed: u64,
    adadf: RunOutput,
    baseline_acc: f64,
    slowest: Duration,
}

fn clean_pairs() -> Vec<SeedPair> {
    SEEDS
        .par_iter()
        .map(|&seed| {
            let cfg = RunConfig { seed, ..RunConfig::default() };
            let t0 = Instant::now();
            let adadf = trainer::run(&cfg).unwrap();
            let t_a = t0.elapsed();
            let t1 = Instant::now();
            let base = trainer::run(&RunConfig { method: Method::Baseline, ..cfg }).unwrap();
            let t_b = t1.elapsed();
            SeedPair {
                seed,
                adadf,
                baseline_acc: base.record.best_test_acc,
                slowest: t_a.max(t_b),
            }
        })
        .collect()
}

fn fusion_recovery(pairs: &[SeedPair]) -> Outcome {
    let gaps: Vec<f64> = pairs.iter().map(|p| p.adadf.record.best_test_acc - p.baseline_acc).collect();
    let wins = gaps.iter().filter(|&&g| g > 0.0).count();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let slowest = pairs.iter().map(|p| p.slowest).max().unwrap();
    let per_seed: Vec<String> = pairs
        .iter()
        .zip(&gaps)
        .map(|(p, g)| format!("s{}:{:.3}/{:.3}({:+.1}pp)", p.seed, p.adadf.record.best_test_acc, p.baseline_acc, 100.0 * g))
        .collect();
    outcome(
        wins >= 4 && mean > 0.01 && slowest < Duration::from_secs(300),
        format!(
            "Ada-DF wins {wins}/5 seeds, mean gain {:+.2}pp, slowest run {:.1}s [{}]",
            100.0 * mean,
            slowest.as_secs_f64(),
            per_seed.join(" ")
        ),
    )
}

fn noise_robustness() -> Outcome {
    let start = Instant::now();
    let bench = noise_bench(&RunConfig::default(), &[0.1, 0.2, 0.3], &SEEDS).unwrap();
    let elapsed = start.elapsed();
    let deltas: Vec<f64> = bench.rows.iter().map(|r| r.delta).collect();
    let positive = deltas.iter().all(|&d| d > 0.0);
    let monotone = deltas.windows(2).all(|w| w[1] >= w[0]);
    let table: Vec<String> = bench
        .rows
        .iter()
        .map(|r| format!("{}:{:.4}/{:.4}({:+.2}pp)", r.rate, r.adadf_acc, r.baseline_acc, 100.0 * r.delta))
        .collect();
    outcome(
        positive && monotone && elapsed < Duration::from_secs(1800),
        format!(
            "gaps positive: {positive}, non-decreasing: {monotone}, {:.0}s total [{}]",
            elapsed.as_secs_f64(),
            table.join(" ")
        ),
    )
}

fn fused_target_fidelity(pair: &SeedPair) -> Outcome {
    let epochs = &pair.adadf.record.epochs;
    let first = epochs.first().and_then(|m| m.fidelity).unwrap();
    let last = epochs.last().and_then(|m| m.fidelity).unwrap();
    outcome(
        last.fused_l1 < last.onehot_l1 && last.fused_l1 < first.label_l1,
        format!(
            "final fused L1 {:.4} vs one-hot {:.4} and epoch-1 label {:.4}",
            last.fused_l1, last.onehot_l1, first.label_l1
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    fs::write(&cfg_path, "seed = 11\nepochs = 5\n").unwrap();
    let train = |out: &Path| {
        Command::new(env!("CARGO_BIN_EXE_adadf"))
            .args(["train", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(out)
            .env_remove("ADADF_CONFIG_DIR")
            .output()
            .unwrap()
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (ra, rb) = (train(&a), train(&b));
    if !(ra.status.success() && rb.status.success()) {
        return outcome(false, format!("train failed: {}", String::from_utf8_lossy(&ra.stderr)));
    }
    let files = ["metrics.jsonl", "checkpoint.bin", "class_tables.jsonl", "fusion_trace.jsonl", "effective_config.toml"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap())
        .collect();
    outcome(
        differing.is_empty() && ra.stdout == rb.stdout,
        format!("{} artifacts compared, differing: {differing:?}", files.len()),
    )
}

fn inference_contract(pair: &SeedPair) -> Outcome {
    let ds = &pair.adadf.dataset;
    let mut model = pair.adadf.model.clone();
    let all: Vec<usize> = (0..ds.len()).collect();
    let before = model.inference(&ds.batch_features(&all)).unwrap();
    let acc_before = trainer::evaluate(&model, ds, Split::Test).unwrap();
    model.zero_auxiliary();
    let after = model.inference(&ds.batch_features(&all)).unwrap();
    let acc_after = trainer::evaluate(&model, ds, Split::Test).unwrap();
    let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
    outcome(
        changed == 0 && acc_before == acc_after,
        format!("{changed} of {} predictions changed; test accuracy {acc_before} -> {acc_after}", all.len()),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    report(1, "gradient correctness", gradient_correctness());
    report(2, "distribution algebra oracles", distribution_oracles());
    report(3, "schedule conformance", schedule_conformance());
    report(4, "rank-regularization contract", rank_regularization_contract());
    let pairs = clean_pairs();
    report(5, "fusion recovery", fusion_recovery(&pairs));
    report(6, "noise robustness direction", noise_robustness());
    report(7, "fused-target fidelity", fused_target_fidelity(&pairs[0]));
    report(8, "determinism", determinism());
    report(9, "inference contract", inference_contract(&pairs[0]));

    let failed: Vec<u32> = results.iter().filter(|(_, _, o)| !o.pass).map(|(n, _, _)| *n).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
