//! Datasets: synthetic ambiguous classification data, symmetric label
//! noise, CSV ingestion/export, and seeded mini-batching.

use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::distribution::ProbVector;
use crate::error::{Error, Result};
use crate::rng;

/// Fraction of synthetic samples placed in the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `n × D` feature matrix.
    pub features: Tensor,
    /// One annotated class per sample.
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Ground-truth label distributions, when known.
    pub true_dists: Option<Vec<ProbVector>>,
    pub splits: Vec<Split>,
    /// Labels before noise injection.
    pub original_labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        true_dists: Option<Vec<ProbVector>>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            num_classes,
            true_dists,
            splits,
            original_labels: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if n == 0 {
            return Err(Error::contract("dataset is empty"));
        }
        if self.num_classes < 2 {
            return Err(Error::contract("dataset needs at least 2 classes"));
        }
        if self.features.shape().len() != 2 || self.features.rows() != n {
            return Err(Error::Dimension {
                op: "dataset",
                lhs: self.features.shape().to_vec(),
                rhs: vec![n],
            });
        }
        if self.splits.len() != n {
            return Err(Error::contract("split tags do not cover every sample"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        if let Some(d) = &self.true_dists {
            if d.len() != n || d.iter().any(|p| p.len() != self.num_classes) {
                return Err(Error::contract("true distributions do not match the dataset"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Dataset indices tagged with `split`, in storage order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices(Split::Test)
    }

    /// Rows `idx` of the feature matrix, as a new `len(idx) × D` tensor.
    pub fn batch_features(&self, idx: &[usize]) -> Tensor {
        let d = self.feature_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        Tensor::new(vec![idx.len(), d], data).expect("batch shape")
    }

    pub fn batch_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Writes the CSV schema read by [`load_csv`]: features, label, optional
    /// distributions, split, and `original_label` when noise was injected.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let d = self.feature_dim();
        let mut header: Vec<String> = (0..d).map(|j| format!("feature_{j}")).collect();
        header.push("label".into());
        if self.true_dists.is_some() {
            header.extend((0..self.num_classes).map(|c| format!("dist_{c}")));
        }
        header.push("split".into());
        if self.original_labels.is_some() {
            header.push("original_label".into());
        }
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut cells: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            cells.push(self.labels[i].to_string());
            if let Some(dists) = &self.true_dists {
                cells.extend(dists[i].as_slice().iter().map(|v| v.to_string()));
            }
            cells.push(self.splits[i].as_str().into());
            if let Some(orig) = &self.original_labels {
                cells.push(orig[i].to_string());
            }
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub features: usize,
    pub n_per_class: usize,
    /// Upper bound of the mixing coefficient toward the confusing class.
    pub ambiguity: f64,
    /// Standard deviation of the isotropic per-coordinate jitter.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    pub seed: u64,
}

fn default_jitter() -> f64 {
    0.2
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            features: 32,
            n_per_class: 500,
            ambiguity: 0.6,
            jitter: default_jitter(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("classes", "must be at least 2"));
        }
        if self.features < 2 {
            return Err(Error::config("features", "must be at least 2"));
        }
        if self.n_per_class == 0 {
            return Err(Error::config("n_per_class", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::config("ambiguity", "must lie in [0, 1]"));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::config("jitter", "must be a nonnegative number"));
        }
        Ok(())
    }
}

/// Inverse-CDF draw of a class from `dist` given `u ∈ [0, 1)`.
pub fn draw_label(dist: &ProbVector, u: f64) -> usize {
    let mut cum = 0.0;
    let mut last = 0;
    for (c, &p) in dist.as_slice().iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last = c;
        if u < cum {
            return c;
        }
    }
    last
}

/// Minimum cosine separation between prototype directions.
const MAX_PROTOTYPE_COSINE: f64 = 0.9;

fn unit_prototypes(cfg: &SyntheticConfig, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    while protos.len() < cfg.classes {
        let v: Vec<f64> = (0..cfg.features).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        let v: Vec<f64> = v.iter().map(|x| x / norm).collect();
        let distinct = protos.iter().all(|p| {
            let cos: f64 = p.iter().zip(&v).map(|(a, b)| a * b).sum();
            cos < MAX_PROTOTYPE_COSINE
        });
        if distinct {
            protos.push(v);
        }
    }
    protos
}

/// Each sample mixes its class prototype with one other prototype by
/// `λ ~ U[0, ambiguity]` and adds Gaussian jitter. The true distribution puts
/// `1 - λ` on the own class and `λ` on the other; training labels are drawn
/// from it, test labels are its argmax.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let c = cfg.classes;
    let d = cfg.features;
    let n = c * cfg.n_per_class;

    let mut geo = rng::stream(cfg.seed, rng::STREAM_DATA, 0);
    let mut label_rng = rng::stream(cfg.seed, rng::STREAM_LABELS, 0);
    let protos = unit_prototypes(cfg, &mut geo);

    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n);
    for own in 0..c {
        for _ in 0..cfg.n_per_class {
            let mut other = geo.gen_range(0..c - 1);
            if other >= own {
                other += 1;
            }
            let lambda = if cfg.ambiguity > 0.0 {
                geo.gen_range(0.0..=cfg.ambiguity)
            } else {
                0.0
            };
            for (a, b) in protos[own].iter().zip(&protos[other]) {
                let jitter: f64 = geo.sample(StandardNormal);
                features.push((1.0 - lambda) * a + lambda * b + cfg.jitter * jitter);
            }
            let mut p = vec![0.0; c];
            p[own] = 1.0 - lambda;
            p[other] += lambda;
            let dist = ProbVector::new(p)?;
            labels.push(draw_label(&dist, label_rng.gen::<f64>()));
            dists.push(dist);
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, rng::STREAM_SPLIT, 0));
    let n_train = ((n as f64) * TRAIN_FRACTION).floor() as usize;
    let mut splits = vec![Split::Train; n];
    for &i in &order[n_train..] {
        splits[i] = Split::Test;
        labels[i] = dists[i].argmax();
    }

    Dataset::new(Tensor::new(vec![n, d], features)?, labels, c, Some(dists), splits)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub rate: f64,
    pub seed: u64,
}

/// Number of training labels flipped at `rate`: `floor(rate · n_train)`.
pub fn noise_count(rate: f64, n_train: usize) -> usize {
    ((rate * n_train as f64) + 1e-9).floor().min(n_train as f64) as usize
}

/// Replaces `floor(rate · n_train)` training labels, chosen uniformly without
/// replacement, by a uniformly drawn different class.
pub fn inject_noise(ds: &Dataset, spec: NoiseSpec) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&spec.rate) {
        return Err(Error::config("noise_rate", "must lie in [0, 1]"));
    }
    let mut out = ds.clone();
    let train = ds.train_indices();
    let k = noise_count(spec.rate, train.len());
    if k == 0 {
        return Ok(out);
    }
    let mut rng = rng::from_seed(spec.seed);
    let chosen = index::sample(&mut rng, train.len(), k);
    if out.original_labels.is_none() {
        out.original_labels = Some(ds.labels.clone());
    }
    let c = ds.num_classes;
    for pos in chosen.iter() {
        let i = train[pos];
        let old = out.labels[i];
        let mut new = rng.gen_range(0..c - 1);
        if new >= old {
            new += 1;
        }
        out.labels[i] = new;
    }
    Ok(out)
}

/// Reads a dataset. Required columns are `feature_0..feature_{D-1}` and
/// `label`; `dist_0..dist_{C-1}`, `split` and `original_label` are optional.
/// Without a `split` column every row is a training row.
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, num_classes)
}

pub fn read_csv<R: std::io::Read>(input: R, num_classes: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header_err = |column: &str, message: &str| Error::Parse {
        line: 1,
        column: column.to_string(),
        message: message.to_string(),
    };
    let headers = reader
        .headers()
        .map_err(|e| header_err("-", &format!("unreadable header: {e}")))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);

    let mut feature_cols = Vec::new();
    while let Some(i) = find(&format!("feature_{}", feature_cols.len())) {
        feature_cols.push(i);
    }
    if feature_cols.is_empty() {
        return Err(header_err("feature_0", "missing column"));
    }
    let label_col = find("label").ok_or_else(|| header_err("label", "missing column"))?;
    let mut dist_cols = Vec::new();
    while let Some(i) = find(&format!("dist_{}", dist_cols.len())) {
        dist_cols.push(i);
    }
    let split_col = find("split");
    let orig_col = find("original_label");

    for (i, h) in headers.iter().enumerate() {
        let known = feature_cols.contains(&i)
            || dist_cols.contains(&i)
            || [Some(label_col), split_col, orig_col].contains(&Some(i));
        if !known {
            return Err(header_err(h.trim(), "unknown or out-of-sequence column"));
        }
    }

    let c = match (num_classes, dist_cols.len()) {
        (Some(c), 0) => c,
        (Some(c), k) if k == c => c,
        (Some(c), k) => {
            return Err(header_err(
                &format!("dist_{}", k.min(c)),
                &format!("expected {c} distribution columns, found {k}"),
            ))
        }
        (None, 0) => 0,
        (None, k) => k,
    };

    let d = feature_cols.len();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dists = Vec::new();
    let mut splits = Vec::new();
    let mut originals = Vec::new();
    let mut lines = Vec::new();

    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            column: "-".into(),
            message: format!("malformed row: {e}"),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let cell = |col: usize| record.get(col).unwrap_or("").trim();
        let number = |col: usize| -> Result<f64> {
            cell(col)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    column: headers[col].to_string(),
                    message: format!("non-numeric value {:?}", cell(col)),
                })
        };
        let class_id = |col: usize| -> Result<usize> {
            cell(col).parse::<usize>().map_err(|_| Error::Parse {
                line,
                column: headers[col].to_string(),
                message: format!("invalid class id {:?}", cell(col)),
            })
        };

        for &col in &feature_cols {
            features.push(number(col)?);
        }
        labels.push(class_id(label_col)?);
        if let Some(col) = orig_col {
            originals.push(class_id(col)?);
        }
        if !dist_cols.is_empty() {
            let mut p = Vec::with_capacity(dist_cols.len());
            for &col in &dist_cols {
                let v = number(col)?;
                if v < 0.0 {
                    return Err(Error::Parse {
                        line,
                        column: headers[col].to_string(),
                        message: "negative distribution entry".into(),
                    });
                }
                p.push(v);
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-4 {
                return Err(Error::Parse {
                    line,
                    column: "dist".into(),
                    message: format!("distribution sums to {sum}"),
                });
            }
            dists.push(ProbVector::new(p.iter().map(|v| v / sum).collect())?);
        }
        splits.push(match split_col.map(cell) {
            None | Some("train") => Split::Train,
            Some("test") => Split::Test,
            Some(other) => {
                return Err(Error::Parse {
                    line,
                    column: "split".into(),
                    message: format!("unknown split {other:?}"),
                })
            }
        });
        lines.push(line);
    }

    if labels.is_empty() {
        return Err(Error::Parse {
            line: 2,
            column: "-".into(),
            message: "no data rows".into(),
        });
    }
    let c = if c == 0 {
        labels.iter().copied().max().unwrap_or(0).max(1) + 1
    } else {
        c
    };
    let check_range = |values: &[usize], column: &str| -> Result<()> {
        match values.iter().position(|&y| y >= c) {
            Some(i) => Err(Error::Parse {
                line: lines[i],
                column: column.to_string(),
                message: "label out of range".into(),
            }),
            None => Ok(()),
        }
    };
    check_range(&labels, "label")?;
    check_range(&originals, "original_label")?;

    let n = labels.len();
    let mut ds = Dataset::new(
        Tensor::new(vec![n, d], features)?,
        labels,
        c,
        (!dists.is_empty()).then_some(dists),
        splits,
    )?;
    if orig_col.is_some() {
        ds.original_labels = Some(originals);
    }
    Ok(ds)
}

/// Appends `test` to `train`, tagging the rows by their source.
pub fn concat_train_test(train: &Dataset, test: &Dataset) -> Result<Dataset> {
    if train.feature_dim() != test.feature_dim() {
        return Err(Error::Dimension {
            op: "concat_train_test",
            lhs: train.features.shape().to_vec(),
            rhs: test.features.shape().to_vec(),
        });
    }
    let num_classes = train.num_classes.max(test.num_classes);
    let mut features = train.features.data().to_vec();
    features.extend_from_slice(test.features.data());
    let n = train.len() + test.len();
    let true_dists = match (&train.true_dists, &test.true_dists) {
        (Some(a), Some(b)) if train.num_classes == test.num_classes => {
            Some(a.iter().chain(b).cloned().collect())
        }
        _ => None,
    };
    let mut labels = train.labels.clone();
    labels.extend(&test.labels);
    let mut splits = vec![Split::Train; train.len()];
    splits.resize(n, Split::Test);
    Dataset::new(
        Tensor::new(vec![n, train.feature_dim()], features)?,
        labels,
        num_classes,
        true_dists,
        splits,
    )
}

/// Re-tags a seeded `TRAIN_FRACTION` of the rows as training, the rest as test.
pub fn random_split(ds: &Dataset, seed: u64) -> Result<Dataset> {
    let n = ds.len();
    let n_train = ((n as f64) * TRAIN_FRACTION).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::contract(format!("{n} rows are too few for a train/test split")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::from_seed(seed));
    let mut out = ds.clone();
    out.splits = vec![Split::Train; n];
    for &i in &order[n_train..] {
        out.splits[i] = Split::Test;
    }
    Ok(out)
}

/// Shuffles `indices` with the epoch's seed and cuts them into batches.
/// A trailing batch of one sample is merged into the batch before it.
pub fn batches(indices: &[usize], batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::config("batch_size", "must be at least 2"));
    }
    if indices.len() < 2 {
        return Err(Error::contract("need at least 2 samples to form a batch"));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut rng::from_seed(epoch_seed));
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    Ok(out)
}
