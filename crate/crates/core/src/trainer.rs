//! Training loop: optimizer, per-batch joint loss, epoch bookkeeping,
//! evaluation and the run driver.

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, Tape, Tensor, Var};
use crate::config::{DataSource, Method, RunConfig};
use crate::data::{self, Dataset, NoiseSpec, Split};
use crate::distribution::{
    average_attention, extract_label_distributions, fuse, normalize_weights, ClassAccumulator,
    ClassDistributionTable, ProbVector, RowSource,
};
use crate::error::{Error, Result};
use crate::losses::{self, LossTerms};
use crate::network::{BoundParams, DualBranchModel, ModelConfig, ParamGroup};
use crate::rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction and a per-epoch multiplicative learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl Adam {
    pub fn new(params: &[&Tensor], lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        }
    }

    /// One update. Parameters whose gradient is `None` are left alone.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.shapes[k].as_slice() {
                return Err(Error::contract(format!(
                    "parameter {k} has shape {:?}, optimizer expects {:?}",
                    p.shape(),
                    self.shapes[k]
                )));
            }
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::contract(format!(
                        "gradient {k} has shape {:?}, parameter has {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    pub fn decay_lr(&mut self, gamma: f64) {
        self.lr *= gamma;
    }
}

/// Detached per-sample quantities that shape the target-branch loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Supervision {
    pub d_label: Vec<ProbVector>,
    pub w_avg: Vec<f64>,
    pub w: Vec<f64>,
    pub d_fused: Vec<ProbVector>,
}

pub struct BatchLoss {
    pub loss: Var,
    pub terms: LossTerms,
    /// `None` in baseline mode.
    pub supervision: Option<Supervision>,
}

/// Builds the joint loss of one batch on `tape`.
///
/// With `frozen` given, its fused targets replace the ones derived from this
/// forward pass; everything else is recomputed.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    model: &DualBranchModel,
    tape: &mut Tape,
    bound: &BoundParams,
    x: Var,
    labels: &[usize],
    table: &ClassDistributionTable,
    cfg: &RunConfig,
    epoch: u32,
    frozen: Option<&Supervision>,
) -> Result<BatchLoss> {
    if cfg.method == Method::Baseline {
        let p_tar = model.target_forward_on(tape, bound, x)?;
        let ce = losses::cross_entropy(tape, p_tar, labels)?;
        let l_ce = tape.value(ce).item();
        let terms = LossTerms {
            l_ce,
            l_kld: 0.0,
            l_rr: 0.0,
            l_total: l_ce,
            alpha1: 1.0,
            alpha2: 1.0,
        };
        return Ok(BatchLoss {
            loss: ce,
            terms,
            supervision: None,
        });
    }

    let out = model.forward_on(tape, bound, x)?;
    let l_ce = losses::cross_entropy(tape, out.p_aux, labels)?;
    let d_label = extract_label_distributions(tape.value(out.p_aux))?;
    let w_avg_var = average_attention(tape, out.w_aux, out.w_tar)?;
    let l_rr = losses::rank_regularization(tape, w_avg_var, cfg.delta, cfg.ratio)?;
    let w_avg = tape.value(w_avg_var).data().to_vec();
    let supervision = match frozen {
        Some(s) => s.clone(),
        None => {
            let w = normalize_weights(&w_avg, cfg.w_min)?;
            let d_fused = fuse(&d_label, table, labels, &w)?;
            Supervision {
                d_label,
                w_avg,
                w,
                d_fused,
            }
        }
    };
    let l_kld = losses::kl_divergence(tape, &supervision.d_fused, out.p_tar)?;
    let (loss, terms) = losses::joint_loss(tape, l_ce, l_kld, l_rr, epoch, cfg.beta)?;
    Ok(BatchLoss {
        loss,
        terms,
        supervision: Some(supervision),
    })
}

/// Largest relative error between the analytic gradient of the joint loss
/// with respect to every parameter and central differences with step `h`.
///
/// Fused targets are detached supervision, so they are computed once at the
/// unperturbed parameters and held fixed while probing.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_grad_check(
    model: &DualBranchModel,
    x: &Tensor,
    labels: &[usize],
    table: &ClassDistributionTable,
    cfg: &RunConfig,
    epoch: u32,
    h: f64,
) -> Result<f64> {
    let params: Vec<Tensor> = model.parameters().into_iter().cloned().collect();
    let base = {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &vec![false; params.len()]);
        let xv = tape.constant(x.clone());
        batch_loss(model, &mut tape, &bound, xv, labels, table, cfg, epoch, None)?.supervision
    };
    grad_check(
        |tape, vars| {
            let bound = BoundParams { vars: vars.to_vec() };
            let xv = tape.constant(x.clone());
            Ok(batch_loss(model, tape, &bound, xv, labels, table, cfg, epoch, base.as_ref())?.loss)
        },
        &params,
        h,
    )
}

/// Which parameters receive gradients under `method`.
pub fn trainable_mask(model: &DualBranchModel, method: Method) -> Vec<bool> {
    model
        .trainable_mask()
        .into_iter()
        .zip(model.param_groups())
        .map(|(t, g)| {
            t && !(method == Method::Baseline
                && (g.is_auxiliary() || g == ParamGroup::TarAttention))
        })
        .collect()
}

/// Mean L1 distances to the ground-truth distributions over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub label_l1: f64,
    pub fused_l1: f64,
    pub onehot_l1: f64,
}

/// One traced sample at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionTrace {
    pub epoch: u32,
    /// Position within the training split.
    pub sample: usize,
    /// Row in the dataset.
    pub index: usize,
    pub label: usize,
    pub d_label: ProbVector,
    pub table_row: ProbVector,
    pub w: f64,
    pub d_fused: ProbVector,
}

pub struct EpochOutcome {
    pub steps: Vec<LossTerms>,
    /// Table mined from this epoch's label distributions; consumed next epoch.
    pub next_table: ClassDistributionTable,
    pub fidelity: Option<Fidelity>,
    pub traces: Vec<FusionTrace>,
}

#[derive(Default)]
struct FidelitySums {
    label: f64,
    fused: f64,
    onehot: f64,
    n: usize,
}

/// One pass over the training split with `table` as the class table.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut DualBranchModel,
    opt: &mut Adam,
    ds: &Dataset,
    table: &ClassDistributionTable,
    cfg: &RunConfig,
    epoch: u32,
    batch_seed: u64,
    trace: &[usize],
) -> Result<EpochOutcome> {
    let train = ds.train_indices();
    let position: std::collections::HashMap<usize, usize> =
        trace.iter().filter(|&&p| p < train.len()).map(|&p| (train[p], p)).collect();
    let mask = trainable_mask(model, cfg.method);
    let mut acc = ClassAccumulator::new(ds.num_classes);
    let mut fid = FidelitySums::default();
    let mut steps = Vec::new();
    let mut traces = Vec::new();
    let mut tape = Tape::new();

    for batch in data::batches(&train, cfg.batch_size, batch_seed)? {
        tape.clear();
        let labels = ds.batch_labels(&batch);
        let bound = model.bind(&mut tape, &mask);
        let x = tape.constant(ds.batch_features(&batch));
        let out = batch_loss(model, &mut tape, &bound, x, &labels, table, cfg, epoch, None)?;
        tape.backward(out.loss)?;
        let grads: Vec<Option<Tensor>> = bound.vars.iter().map(|&v| tape.grad(v)).collect();
        opt.step(&mut model.parameters_mut(), &grads)?;
        steps.push(out.terms);

        let Some(sup) = out.supervision else { continue };
        for (k, &i) in batch.iter().enumerate() {
            acc.add(&sup.d_label[k], labels[k])?;
            if let Some(truth) = &ds.true_dists {
                let truth = &truth[i];
                fid.label += sup.d_label[k].l1_distance(truth);
                fid.fused += sup.d_fused[k].l1_distance(truth);
                fid.onehot += ProbVector::one_hot(labels[k], ds.num_classes).l1_distance(truth);
                fid.n += 1;
            }
            if let Some(&p) = position.get(&i) {
                traces.push(FusionTrace {
                    epoch,
                    sample: p,
                    index: i,
                    label: labels[k],
                    d_label: sup.d_label[k].clone(),
                    table_row: table.row(labels[k]).clone(),
                    w: sup.w[k],
                    d_fused: sup.d_fused[k].clone(),
                });
            }
        }
    }
    traces.sort_by_key(|t| t.sample);

    let next_table = match cfg.method {
        Method::Adadf => acc.finish(cfg.t, epoch),
        Method::Baseline => ClassDistributionTable {
            epoch,
            ..table.clone()
        },
    };
    let fidelity = (fid.n > 0).then(|| {
        let n = fid.n as f64;
        Fidelity {
            label_l1: fid.label / n,
            fused_l1: fid.fused / n,
            onehot_l1: fid.onehot / n,
        }
    });
    opt.decay_lr(cfg.gamma);
    Ok(EpochOutcome {
        steps,
        next_table,
        fidelity,
        traces,
    })
}

/// Fraction of `split` predicted correctly by the target branch.
pub fn evaluate(model: &DualBranchModel, ds: &Dataset, split: Split) -> Result<f64> {
    let idx = ds.indices(split);
    accuracy(model, ds, &idx)
}

pub fn accuracy(model: &DualBranchModel, ds: &Dataset, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    const CHUNK: usize = 512;
    let mut correct = 0usize;
    for chunk in idx.chunks(CHUNK) {
        let pred = model.inference(&ds.batch_features(chunk))?;
        correct += pred.iter().zip(chunk).filter(|(p, &i)| **p == ds.labels[i]).count();
    }
    Ok(correct as f64 / idx.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub train_acc: f64,
    pub test_acc: f64,
    pub l_ce: f64,
    pub l_kld: f64,
    pub l_rr: f64,
    pub l_total: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Row sources of the table used during the epoch.
    pub table_sources: Vec<RowSource>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fidelity: Option<Fidelity>,
    pub steps: Vec<LossTerms>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub initial_test_acc: f64,
    pub epochs: Vec<EpochMetrics>,
    /// Highest test accuracy over the initial evaluation and every epoch.
    pub best_test_acc: f64,
    /// 0 when the best accuracy is the initial one.
    pub best_epoch: u32,
    pub final_test_acc: f64,
}

pub struct RunOutput {
    pub record: MetricsRecord,
    pub model: DualBranchModel,
    /// Table mined at the end of each epoch.
    pub tables: Vec<ClassDistributionTable>,
    pub traces: Vec<FusionTrace>,
    pub dataset: Dataset,
}

/// Builds the dataset described by `cfg.data` and applies label noise.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = match &cfg.data {
        DataSource::Synthetic(s) => data::generate_synthetic(&s.resolve(cfg.seed))?,
        DataSource::Csv(c) => {
            let train = data::load_csv(&c.path, c.classes)?;
            match &c.test_path {
                Some(p) => {
                    let test = data::load_csv(p, Some(c.classes.unwrap_or(train.num_classes)))?;
                    data::concat_train_test(&train, &test)?
                }
                None if train.splits.iter().all(|&s| s == Split::Train) => {
                    data::random_split(&train, rng::derive_seed(cfg.seed, rng::STREAM_SPLIT, 0))?
                }
                None => train,
            }
        }
    };
    if cfg.noise_rate > 0.0 {
        let seed = rng::derive_seed(cfg.seed, rng::STREAM_NOISE, 0);
        return data::inject_noise(&ds, NoiseSpec { rate: cfg.noise_rate, seed });
    }
    Ok(ds)
}

pub fn model_config(cfg: &RunConfig, ds: &Dataset) -> ModelConfig {
    ModelConfig {
        input_dim: ds.feature_dim(),
        extractor_dims: cfg.model.extractor_dims.clone(),
        branch_dims: cfg.model.branch_dims.clone(),
        num_classes: ds.num_classes,
        freeze_extractor: cfg.freeze_extractor,
        seed: cfg.seed,
        attention: cfg.method == Method::Adadf,
        detach_attention_input: cfg.model.detach_attention_input,
    }
}

pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let ds = prepare_dataset(cfg)?;
    run_with_dataset(cfg, ds)
}

pub fn run_with_dataset(cfg: &RunConfig, ds: Dataset) -> Result<RunOutput> {
    cfg.validate()?;
    let n_train = ds.train_indices().len();
    if let Some(&bad) = cfg.trace_samples.iter().find(|&&p| p >= n_train) {
        return Err(Error::config(
            "trace_samples",
            format!("sample {bad} is out of range for {n_train} training samples"),
        ));
    }
    let mut model = DualBranchModel::init(model_config(cfg, &ds))?;
    run_with_model(cfg, ds, &mut model).map(|(record, tables, traces, ds)| RunOutput {
        record,
        model,
        tables,
        traces,
        dataset: ds,
    })
}

type RunParts = (MetricsRecord, Vec<ClassDistributionTable>, Vec<FusionTrace>, Dataset);

fn run_with_model(cfg: &RunConfig, ds: Dataset, model: &mut DualBranchModel) -> Result<RunParts> {
    let train_idx = ds.train_indices();
    let mut opt = Adam::new(&model.parameters(), cfg.lr0);
    let mut table = ClassDistributionTable::threshold_only(ds.num_classes, cfg.t);
    let initial_test_acc = evaluate(model, &ds, Split::Test)?;
    let mut epochs = Vec::with_capacity(cfg.epochs as usize);
    let mut tables = Vec::with_capacity(cfg.epochs as usize);
    let mut traces = Vec::new();
    let (mut best_test_acc, mut best_epoch) = (initial_test_acc, 0);

    for e in 1..=cfg.epochs {
        let lr = opt.lr;
        let seed = rng::derive_seed(cfg.seed, rng::STREAM_BATCHES, e as u64);
        let out = train_epoch(model, &mut opt, &ds, &table, cfg, e, seed, &cfg.trace_samples)?;
        let test_acc = evaluate(model, &ds, Split::Test)?;
        if test_acc > best_test_acc {
            best_test_acc = test_acc;
            best_epoch = e;
        }
        let n = out.steps.len() as f64;
        let mean = |f: fn(&LossTerms) -> f64| out.steps.iter().map(f).sum::<f64>() / n;
        epochs.push(EpochMetrics {
            epoch: e,
            train_acc: accuracy(model, &ds, &train_idx)?,
            test_acc,
            l_ce: mean(|s| s.l_ce),
            l_kld: mean(|s| s.l_kld),
            l_rr: mean(|s| s.l_rr),
            l_total: mean(|s| s.l_total),
            alpha1: out.steps[0].alpha1,
            alpha2: out.steps[0].alpha2,
            lr,
            table_sources: table.sources.clone(),
            fidelity: out.fidelity,
            steps: out.steps,
        });
        traces.extend(out.traces);
        table = out.next_table;
        tables.push(table.clone());
    }

    let final_test_acc = epochs.last().map_or(initial_test_acc, |m| m.test_acc);
    let record = MetricsRecord {
        initial_test_acc,
        epochs,
        best_test_acc,
        best_epoch,
        final_test_acc,
    };
    Ok((record, tables, traces, ds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelSection, SyntheticSource};
    use crate::distribution::mine_class_distributions;
    use rand::Rng as _;

    fn tiny_cfg(seed: u64) -> RunConfig {
        RunConfig {
            seed,
            epochs: 2,
            batch_size: 16,
            beta: 1,
            trace_samples: vec![0, 3],
            model: ModelSection {
                extractor_dims: vec![8],
                branch_dims: vec![8],
                detach_attention_input: false,
            },
            data: DataSource::Synthetic(SyntheticSource {
                classes: 3,
                features: 6,
                n_per_class: 20,
                ambiguity: 0.4,
                jitter: 0.2,
                seed: None,
            }),
            ..RunConfig::default()
        }
    }

    fn tensor(shape: &[usize], values: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = tensor(&[3], &[1.0, -2.0, 0.5]);
        let mut opt = Adam::new(&[&p], 0.001);
        let g = tensor(&[3], &[0.3, -7.0, 2.0]);
        opt.step(&mut [&mut p], &[Some(g.clone())]).unwrap();
        // Reference: m̂ = g, v̂ = g², step = lr·g/(|g|+ε).
        for ((new, old), gj) in p.data().iter().zip([1.0, -2.0, 0.5]).zip(g.data()) {
            let expected = old - 0.001 * gj / (gj.abs() + 1e-8);
            assert!((new - expected).abs() < 1e-15);
            assert!(((old - new).abs() - 0.001).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let before = p.clone();
        let mut opt = Adam::new(&[&p], 0.01);
        opt.step(&mut [&mut p], &[Some(Tensor::zeros(&[2, 2]))]).unwrap();
        assert_eq!(p, before);
        opt.step(&mut [&mut p], &[None]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = tensor(&[2], &[1.0, 2.0]);
        let mut opt = Adam::new(&[&p], 0.01);
        let err = opt.step(&mut [&mut p], &[Some(Tensor::zeros(&[3]))]);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn adam_two_steps_match_reference() {
        let mut p = tensor(&[1], &[0.0]);
        let mut opt = Adam::new(&[&p], 0.1);
        opt.step(&mut [&mut p], &[Some(tensor(&[1], &[1.0]))]).unwrap();
        opt.step(&mut [&mut p], &[Some(tensor(&[1], &[-0.5]))]).unwrap();
        // m = 0.1·1·0.9 + 0.1·(-0.5) = 0.04, v = 0.999·0.001 + 0.001·0.25 = 0.001249
        let m_hat = 0.04 / (1.0 - 0.81);
        let v_hat = 0.001249 / (1.0 - 0.998001);
        let expected = -0.1 * (1.0 / (1.0 + 1e-8)) - 0.1 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn lr_decay_schedule() {
        let mut opt = Adam::new(&[], 0.001);
        opt.decay_lr(0.9);
        assert!((opt.lr - 0.0009).abs() < 1e-18);
        opt.decay_lr(0.9);
        assert!((opt.lr - 0.00081).abs() < 1e-18);
        let mut flat = Adam::new(&[], 0.001);
        flat.decay_lr(1.0);
        assert_eq!(flat.lr, 0.001);
    }

    #[test]
    fn evaluate_counts_and_is_order_free() {
        let cfg = tiny_cfg(1);
        let out = run(&RunConfig { epochs: 0, ..cfg }).unwrap();
        let idx = out.dataset.test_indices();
        let a = accuracy(&out.model, &out.dataset, &idx).unwrap();
        let mut rev = idx.clone();
        rev.reverse();
        assert_eq!(a, accuracy(&out.model, &out.dataset, &rev).unwrap());

        let mut ds = out.dataset.clone();
        let four = &idx[..4];
        let pred = out.model.inference(&ds.batch_features(four)).unwrap();
        for (k, &i) in four.iter().enumerate() {
            ds.labels[i] = pred[k];
        }
        assert_eq!(accuracy(&out.model, &ds, four).unwrap(), 1.0);
        for &i in &four[..2] {
            ds.labels[i] = (ds.labels[i] + 1) % ds.num_classes;
        }
        assert_eq!(accuracy(&out.model, &ds, four).unwrap(), 0.5);
        assert!(accuracy(&out.model, &ds, &[]).is_err());
    }

    #[test]
    fn zero_epochs_records_initial_evaluation() {
        let out = run(&RunConfig { epochs: 0, ..tiny_cfg(2) }).unwrap();
        let r = &out.record;
        assert!(r.epochs.is_empty());
        assert_eq!(r.best_epoch, 0);
        assert_eq!(r.best_test_acc, r.initial_test_acc);
        assert_eq!(r.final_test_acc, r.initial_test_acc);
    }

    #[test]
    fn identical_configs_give_identical_records() {
        let a = run(&tiny_cfg(3)).unwrap();
        let b = run(&tiny_cfg(3)).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.model, b.model);
        assert_ne!(run(&tiny_cfg(4)).unwrap().record, a.record);
    }

    #[test]
    fn first_epoch_uses_threshold_rows_everywhere() {
        let out = run(&tiny_cfg(5)).unwrap();
        let first = &out.record.epochs[0];
        assert!(first.table_sources.iter().all(|&s| s == RowSource::ThresholdFallback));
        let cfg = tiny_cfg(5);
        for tr in out.traces.iter().filter(|t| t.epoch == 1) {
            let expected = crate::distribution::threshold_distribution(tr.label, cfg.t, 3);
            assert_eq!(tr.table_row, expected);
        }
    }

    #[test]
    fn recorded_steps_satisfy_joint_loss_identity() {
        let out = run(&tiny_cfg(6)).unwrap();
        for m in &out.record.epochs {
            assert_eq!(m.alpha1, losses::alpha1(m.epoch, 1));
            assert_eq!(m.alpha2, losses::alpha2(m.epoch, 1));
            for s in &m.steps {
                assert!((s.l_total - (s.l_rr + s.alpha1 * s.l_ce + s.alpha2 * s.l_kld)).abs() < 1e-9);
                assert!(s.l_ce >= 0.0 && s.l_kld >= 0.0 && s.l_rr >= 0.0);
            }
        }
    }

    #[test]
    fn lr_recorded_per_epoch_follows_decay() {
        let out = run(&RunConfig { epochs: 3, ..tiny_cfg(7) }).unwrap();
        for m in &out.record.epochs {
            let expected = 0.001 * 0.9f64.powi(m.epoch as i32 - 1);
            assert!((m.lr - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_extractor_is_bitwise_unchanged() {
        let cfg = RunConfig { freeze_extractor: true, ..tiny_cfg(8) };
        let ds = prepare_dataset(&cfg).unwrap();
        let init = DualBranchModel::init(model_config(&cfg, &ds)).unwrap();
        let out = run_with_dataset(&cfg, ds).unwrap();
        assert_eq!(out.model.extractor, init.extractor);
        assert_ne!(out.model.tar, init.tar);
    }

    #[test]
    fn baseline_leaves_auxiliary_branch_untouched() {
        let cfg = RunConfig { method: Method::Baseline, ..tiny_cfg(9) };
        let ds = prepare_dataset(&cfg).unwrap();
        let init = DualBranchModel::init(model_config(&cfg, &ds)).unwrap();
        let out = run_with_dataset(&cfg, ds).unwrap();
        assert_eq!(out.model.aux, init.aux);
        assert_eq!(out.model.tar.attention, init.tar.attention);
        for s in out.record.epochs.iter().flat_map(|m| &m.steps) {
            assert_eq!((s.l_kld, s.l_rr, s.l_total), (0.0, 0.0, s.l_ce));
        }
    }

    #[test]
    fn single_batch_table_matches_mining_oracle() {
        let mut cfg = tiny_cfg(10);
        cfg.batch_size = 1000;
        let ds = prepare_dataset(&cfg).unwrap();
        let mut model = DualBranchModel::init(model_config(&cfg, &ds)).unwrap();
        let before = model.clone();
        let mut opt = Adam::new(&model.parameters(), cfg.lr0);
        let table = ClassDistributionTable::threshold_only(3, cfg.t);
        let out = train_epoch(&mut model, &mut opt, &ds, &table, &cfg, 1, 0, &[]).unwrap();

        let train = ds.train_indices();
        let p_aux = before.forward(&ds.batch_features(&train)).unwrap().p_aux;
        let dists = extract_label_distributions(&p_aux).unwrap();
        let oracle = mine_class_distributions(&dists, &ds.batch_labels(&train), 3, cfg.t).unwrap();
        assert_eq!(out.next_table.sources, oracle.sources);
        for c in 0..3 {
            for (a, b) in out.next_table.row(c).as_slice().iter().zip(oracle.row(c).as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn target_branch_kl_gradient_scales_with_alpha2() {
        let mut cfg = tiny_cfg(11);
        cfg.beta = 1000;
        let ds = prepare_dataset(&cfg).unwrap();
        let model = DualBranchModel::init(model_config(&cfg, &ds)).unwrap();
        let idx: Vec<usize> = ds.train_indices()[..16].to_vec();
        let table = ClassDistributionTable::threshold_only(3, cfg.t);
        let grad_norm = |epoch: u32| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, &model.trainable_mask());
            let x = tape.constant(ds.batch_features(&idx));
            let out = batch_loss(&model, &mut tape, &bound, x, &ds.batch_labels(&idx), &table, &cfg, epoch, None).unwrap();
            tape.backward(out.loss).unwrap();
            let groups = model.param_groups();
            bound
                .vars
                .iter()
                .zip(groups)
                .filter(|(_, g)| *g == ParamGroup::TarClassifier)
                .map(|(&v, _)| tape.grad(v).map_or(0.0, |t| t.data().iter().map(|x| x * x).sum::<f64>()))
                .sum::<f64>()
                .sqrt()
        };
        let early = grad_norm(1);
        let late = grad_norm(1000);
        let a2 = losses::alpha2(1, 1000);
        assert!((early / late - a2).abs() < 1e-9, "{early} vs {late}");
        // The ramp bottoms out at e^-1, never at zero.
        assert!(a2 > (-1.0f64).exp() && a2 < 0.37);
    }

    #[test]
    fn traces_record_requested_samples_each_epoch() {
        let out = run(&tiny_cfg(12)).unwrap();
        assert_eq!(out.traces.len(), 4);
        let train = out.dataset.train_indices();
        for t in &out.traces {
            assert_eq!(t.index, train[t.sample]);
            for ((f, r), l) in t.d_fused.as_slice().iter().zip(t.table_row.as_slice()).zip(t.d_label.as_slice()) {
                assert!((f - (t.w * r + (1.0 - t.w) * l)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn removing_auxiliary_branch_keeps_accuracy() {
        let mut out = run(&tiny_cfg(13)).unwrap();
        let before = evaluate(&out.model, &out.dataset, Split::Test).unwrap();
        out.model.zero_auxiliary();
        assert_eq!(evaluate(&out.model, &out.dataset, Split::Test).unwrap(), before);
    }

    fn tiny_grad_check(seed: u64) -> f64 {
        let mcfg = ModelConfig {
            input_dim: 8,
            extractor_dims: vec![8],
            branch_dims: vec![8],
            num_classes: 3,
            freeze_extractor: false,
            seed,
            attention: true,
            detach_attention_input: false,
        };
        let model = DualBranchModel::init(mcfg).unwrap();
        let mut r = rng::from_seed(seed);
        let x = Tensor::new(vec![6, 8], (0..48).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..6).map(|_| r.gen_range(0..3)).collect();
        let table = ClassDistributionTable::threshold_only(3, 0.7);
        let epoch = r.gen_range(1..=6);
        joint_loss_grad_check(&model, &x, &labels, &table, &RunConfig::default(), epoch, 1e-5).unwrap()
    }

    #[test]
    fn joint_loss_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let err = tiny_grad_check(seed);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
