//! Label/class distribution algebra: extraction, class mining with a
//! threshold fallback, attention averaging and normalization, and fusion.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Tolerance on the unit-sum invariant.
pub const PROB_TOL: f64 = 1e-6;

/// Nonnegative vector summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("empty probability vector"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::contract(format!("probability entry {v} is negative or not finite")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(Error::contract(format!("probability vector sums to {sum}")));
        }
        Ok(Self(values))
    }

    pub fn one_hot(class: usize, num_classes: usize) -> Self {
        let mut v = vec![0.0; num_classes];
        v[class] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn l1_distance(&self, other: &ProbVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }

    /// Index of the largest entry; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowSource {
    Mined,
    ThresholdFallback,
}

/// One distribution per class, as used to build fused targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistributionTable {
    pub rows: Vec<ProbVector>,
    pub sources: Vec<RowSource>,
    /// Epoch whose label distributions produced this table; 0 for the
    /// all-threshold initial table.
    pub epoch: u32,
}

impl ClassDistributionTable {
    /// Table with every row set to its threshold distribution.
    pub fn threshold_only(num_classes: usize, t: f64) -> Self {
        Self {
            rows: (0..num_classes)
                .map(|c| threshold_distribution(c, t, num_classes))
                .collect(),
            sources: vec![RowSource::ThresholdFallback; num_classes],
            epoch: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, class: usize) -> &ProbVector {
        &self.rows[class]
    }

    /// Writes `C` rows by `C` columns; the header holds the class names.
    pub fn write_csv<W: Write>(&self, names: &[String], mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", names.join(","))?;
        for row in &self.rows {
            let cells: Vec<String> = row.as_slice().iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Default class names `class_0 .. class_{C-1}`.
pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|c| format!("class_{c}")).collect()
}

/// Copies each softmax row of `p_aux` into a standalone distribution.
pub fn extract_label_distributions(p_aux: &Tensor) -> Result<Vec<ProbVector>> {
    p_aux
        .row_iter()
        .map(|row| ProbVector::new(row.to_vec()))
        .collect()
}

/// Mass `t` on class `c`, `(1 - t) / (C - 1)` on every other class.
pub fn threshold_distribution(c: usize, t: f64, num_classes: usize) -> ProbVector {
    assert!(num_classes >= 2 && c < num_classes);
    assert!(t > 0.0 && t < 1.0, "threshold t must lie in (0, 1), got {t}");
    let rest = (1.0 - t) / (num_classes - 1) as f64;
    let mut v = vec![rest; num_classes];
    v[c] = t;
    ProbVector(v)
}

/// Running per-class sums of label distributions.
#[derive(Clone, Debug)]
pub struct ClassAccumulator {
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl ClassAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            sums: vec![vec![0.0; num_classes]; num_classes],
            counts: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, dist: &ProbVector, label: usize) -> Result<()> {
        let c = self.num_classes();
        if label >= c {
            return Err(Error::contract(format!("label {label} out of range for {c} classes")));
        }
        if dist.len() != c {
            return Err(Error::contract(format!(
                "distribution has {} entries, expected {c}",
                dist.len()
            )));
        }
        for (s, d) in self.sums[label].iter_mut().zip(dist.as_slice()) {
            *s += d;
        }
        self.counts[label] += 1;
        Ok(())
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Class means; a row whose own-class entry is below `t`, or whose
    /// class had no samples, is replaced by its threshold distribution.
    pub fn finish(&self, t: f64, epoch: u32) -> ClassDistributionTable {
        let c = self.num_classes();
        let mut rows = Vec::with_capacity(c);
        let mut sources = Vec::with_capacity(c);
        for class in 0..c {
            let n = self.counts[class];
            let mean: Option<Vec<f64>> = (n > 0)
                .then(|| self.sums[class].iter().map(|s| s / n as f64).collect());
            match mean {
                Some(m) if m[class] >= t => {
                    rows.push(ProbVector(m));
                    sources.push(RowSource::Mined);
                }
                _ => {
                    rows.push(threshold_distribution(class, t, c));
                    sources.push(RowSource::ThresholdFallback);
                }
            }
        }
        ClassDistributionTable { rows, sources, epoch }
    }
}

pub fn mine_class_distributions(
    dists: &[ProbVector],
    labels: &[usize],
    num_classes: usize,
    t: f64,
) -> Result<ClassDistributionTable> {
    if dists.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} distributions but {} labels",
            dists.len(),
            labels.len()
        )));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::contract(format!("threshold t must lie in (0, 1), got {t}")));
    }
    let mut acc = ClassAccumulator::new(num_classes);
    for (d, &y) in dists.iter().zip(labels) {
        acc.add(d, y)?;
    }
    Ok(acc.finish(t, 0))
}

/// Elementwise mean of the two attention heads; stays on the tape.
pub fn average_attention(tape: &mut Tape, w_aux: Var, w_tar: Var) -> Result<Var> {
    let (a, b) = (tape.value(w_aux).len(), tape.value(w_tar).len());
    if a != b {
        return Err(Error::contract(format!("attention lengths differ: {a} vs {b}")));
    }
    let sum = tape.add(w_aux, w_tar)?;
    Ok(tape.affine(sum, 0.5, 0.0))
}

/// Min-max rescale to `[w_min, 1]`. A batch with no spread maps to all ones.
pub fn normalize_weights(w_avg: &[f64], w_min: f64) -> Result<Vec<f64>> {
    if w_avg.is_empty() {
        return Err(Error::contract("cannot normalize an empty batch"));
    }
    if !(0.0..1.0).contains(&w_min) {
        return Err(Error::contract(format!("w_min must lie in [0, 1), got {w_min}")));
    }
    let lo = w_avg.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = w_avg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(vec![1.0; w_avg.len()]);
    }
    let span = hi - lo;
    Ok(w_avg
        .iter()
        .map(|&w| {
            if w == hi {
                1.0
            } else if w == lo {
                w_min
            } else {
                ((w - lo) / span * (1.0 - w_min) + w_min).clamp(w_min, 1.0)
            }
        })
        .collect())
}

/// `w · table[y] + (1 - w) · d_label`, per sample.
pub fn fuse(
    d_label: &[ProbVector],
    table: &ClassDistributionTable,
    labels: &[usize],
    w: &[f64],
) -> Result<Vec<ProbVector>> {
    if d_label.len() != labels.len() || d_label.len() != w.len() {
        return Err(Error::contract(format!(
            "fuse length mismatch: {} distributions, {} labels, {} weights",
            d_label.len(),
            labels.len(),
            w.len()
        )));
    }
    let c = table.num_classes();
    d_label
        .iter()
        .zip(labels)
        .zip(w)
        .map(|((d, &y), &wi)| {
            if y >= c {
                return Err(Error::contract(format!("label {y} out of range for {c} classes")));
            }
            if !(0.0..=1.0).contains(&wi) {
                return Err(Error::contract(format!("fusion weight {wi} outside [0, 1]")));
            }
            if d.len() != c {
                return Err(Error::contract(format!(
                    "label distribution has {} entries, expected {c}",
                    d.len()
                )));
            }
            let row = table.row(y).as_slice();
            let fused = row
                .iter()
                .zip(d.as_slice())
                .map(|(r, l)| wi * r + (1.0 - wi) * l)
                .collect();
            ProbVector::new(fused)
        })
        .collect()
}
