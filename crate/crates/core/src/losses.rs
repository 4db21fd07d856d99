//! Loss terms and the epoch ramp that weights them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var, LOG_EPS};
use crate::distribution::ProbVector;
use crate::error::{Error, Result};

/// Default rank-regularization margin.
pub const RR_DELTA: f64 = 0.07;
/// Default fraction of a batch placed in the high-attention group.
pub const RR_RATIO: f64 = 0.7;

/// Scalar values of one step's losses and the ramp weights applied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_ce: f64,
    pub l_kld: f64,
    pub l_rr: f64,
    pub l_total: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl LossTerms {
    /// Weights the components with the ramp at epoch `epoch`.
    pub fn compose(l_ce: f64, l_kld: f64, l_rr: f64, epoch: u32, beta: u32) -> Self {
        let alpha1 = alpha1(epoch, beta);
        let alpha2 = alpha2(epoch, beta);
        Self {
            l_ce,
            l_kld,
            l_rr,
            l_total: l_rr + alpha1 * l_ce + alpha2 * l_kld,
            alpha1,
            alpha2,
        }
    }
}

/// Mean negative log-likelihood of `labels` under the rows of `p`.
pub fn cross_entropy(tape: &mut Tape, p: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(p).shape().to_vec();
    let [n, c] = shape[..] else {
        return Err(Error::contract(format!("cross_entropy expects n×C, got {shape:?}")));
    };
    if labels.len() != n {
        return Err(Error::contract(format!("{n} rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
    }
    let idx = labels.iter().enumerate().map(|(i, &y)| i * c + y).collect();
    let picked = tape.gather(p, idx)?;
    let logp = tape.log_clamped(picked);
    let mean = tape.mean(logp);
    Ok(tape.affine(mean, -1.0, 0.0))
}

/// Mean over rows of `KL(target || p)`, with `0 · ln 0 = 0`.
///
/// `targets` are constants; only `p` receives gradient.
pub fn kl_divergence(tape: &mut Tape, targets: &[ProbVector], p: Var) -> Result<Var> {
    let shape = tape.value(p).shape().to_vec();
    let [n, c] = shape[..] else {
        return Err(Error::contract(format!("kl_divergence expects n×C, got {shape:?}")));
    };
    if targets.len() != n || targets.iter().any(|t| t.len() != c) {
        return Err(Error::contract(format!(
            "targets do not match predictions of shape [{n}, {c}]"
        )));
    }
    let mut flat = Vec::with_capacity(n * c);
    let mut entropy_term = 0.0;
    for t in targets {
        for &d in t.as_slice() {
            if d > 0.0 {
                entropy_term += d * d.max(LOG_EPS).ln();
            }
            flat.push(d);
        }
    }
    let d = tape.constant(Tensor::new(vec![n, c], flat)?);
    let logp = tape.log_clamped(p);
    let cross = tape.mul(d, logp)?;
    let total = tape.sum(cross);
    let nf = n as f64;
    Ok(tape.affine(total, -1.0 / nf, entropy_term / nf))
}

/// Size of the high-attention group: `floor(ratio · n)` kept in `[1, n-1]`.
pub fn high_group_size(n: usize, ratio: f64) -> usize {
    // small bias so that e.g. 0.7 · 10 lands on 7, not 6.999…
    let m = (ratio * n as f64 + 1e-9).floor() as usize;
    m.clamp(1, n - 1)
}

/// Hinge on the gap between the mean of the top `M` and the remaining
/// attention weights: `max(0, delta - (w_H - w_L))`.
pub fn rank_regularization(tape: &mut Tape, w_avg: Var, delta: f64, ratio: f64) -> Result<Var> {
    let values = tape.value(w_avg).data().to_vec();
    let n = values.len();
    if n < 2 {
        return Err(Error::contract(format!(
            "rank regularization needs at least 2 samples, got {n}"
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::contract(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    let order = descending_order(&values);
    let m = high_group_size(n, ratio);
    let high = tape.gather(w_avg, order[..m].to_vec())?;
    let low = tape.gather(w_avg, order[m..].to_vec())?;
    let w_high = tape.mean(high);
    let w_low = tape.mean(low);
    let gap = tape.sub(w_high, w_low)?;
    let slack = tape.affine(gap, -1.0, delta);
    Ok(tape.relu(slack))
}

/// Indices sorted by value, largest first. Equal values keep index order.
pub(crate) fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order
}

/// Weight of the auxiliary cross-entropy at (1-based) epoch `epoch`.
pub fn alpha1(epoch: u32, beta: u32) -> f64 {
    if epoch <= beta {
        1.0
    } else {
        let r = 1.0 - beta as f64 / epoch as f64;
        (-(r * r)).exp()
    }
}

/// Weight of the target-branch KL term at (1-based) epoch `epoch`.
pub fn alpha2(epoch: u32, beta: u32) -> f64 {
    if epoch <= beta {
        let r = 1.0 - epoch as f64 / beta as f64;
        (-(r * r)).exp()
    } else {
        1.0
    }
}

/// `l_rr + alpha1 · l_ce + alpha2 · l_kld` on the tape, with its scalar record.
pub fn joint_loss(
    tape: &mut Tape,
    l_ce: Var,
    l_kld: Var,
    l_rr: Var,
    epoch: u32,
    beta: u32,
) -> Result<(Var, LossTerms)> {
    let terms = LossTerms::compose(
        tape.value(l_ce).item(),
        tape.value(l_kld).item(),
        tape.value(l_rr).item(),
        epoch,
        beta,
    );
    let ce = tape.affine(l_ce, terms.alpha1, 0.0);
    let kld = tape.affine(l_kld, terms.alpha2, 0.0);
    let sum = tape.add(ce, kld)?;
    let total = tape.add(l_rr, sum)?;
    Ok((total, terms))
}
