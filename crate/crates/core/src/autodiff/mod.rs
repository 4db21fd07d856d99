//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] is a Wengert list: every primitive appends one node holding its
//! output value and the handles of its inputs. Nodes are only ever appended,
//! so node index order is a topological order and [`Tape::backward`] simply
//! walks the list from the loss back to the first node.
//!
//! Model parameters are not owned by the tape. A forward pass registers a
//! copy of each parameter as a leaf, and the caller reads the leaf gradients
//! back out after `backward`. [`Tape::clear`] drops every node, so one tape can
//! be reused across training steps.

mod gradcheck;
mod kernels;
mod tensor;

pub use gradcheck::grad_check;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Floor applied to every logarithm argument.
pub const LOG_EPS: f64 = 1e-12;

/// Sigmoid inputs are clamped to `[-SIGMOID_CLAMP, SIGMOID_CLAMP]` so the
/// output stays strictly inside (0, 1).
pub const SIGMOID_CLAMP: f64 = 30.0;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogClamped(Var),
    ScaleRows { x: Var, w: Var },
    Gather { x: Var, indices: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Resets stored gradients without dropping nodes.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of the value with no connection to the tape.
    pub fn detach(&self, v: Var) -> Tensor {
        self.nodes[v.0].value.clone()
    }

    /// Accumulated gradient, present after a `backward` that reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[n×m] + bias[m]`, bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims(x, "add_bias")?;
        if self.value(bias).len() != m {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: vec![n, m],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| scale * e + shift).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Affine { x, scale }, &[x])
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| f(e)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[x])
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |e| if e > 0.0 { e } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), |e| {
            let e = e.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
            1.0 / (1.0 + (-e).exp())
        })
    }

    /// `ln(max(x, LOG_EPS))`.
    pub fn log_clamped(&mut self, x: Var) -> Var {
        self.map(x, Op::LogClamped(x), |e| e.max(LOG_EPS).ln())
    }

    /// Row-wise softmax of an `n×C` matrix, max-shifted for stability.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.matrix_dims(x, "softmax_rows")?;
        if c < 2 {
            return Err(Error::contract(format!(
                "softmax_rows needs at least 2 columns, got {c}"
            )));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::SoftmaxRows(x), &[x]))
    }

    /// Multiplies row `i` of `x[n×d]` by the scalar `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "scale_rows")?;
        if self.value(w).len() != n {
            return Err(Error::Dimension {
                op: "scale_rows",
                lhs: vec![n, d],
                rhs: self.shape(w).to_vec(),
            });
        }
        let ws = self.value(w).data();
        let mut out = self.value(x).data().to_vec();
        for (row, &wi) in out.chunks_mut(d).zip(ws) {
            for o in row {
                *o *= wi;
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(value, Op::ScaleRows { x, w }, &[x, w]))
    }

    /// Picks entries by flat (row-major) index into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let v = self.value(x);
        if indices.is_empty() {
            return Err(Error::contract("gather with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
            return Err(Error::contract(format!(
                "gather index {bad} out of range for {} elements",
                v.len()
            )));
        }
        let data: Vec<f64> = indices.iter().map(|&i| v.data()[i]).collect();
        let value = Tensor::vector(data)?;
        Ok(self.push(value, Op::Gather { x, indices }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    ///
    /// Gradients accumulate into previously stored ones; call
    /// [`Tape::zero_grad`] or rebuild the tape between steps.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                send(*a, &mut |ga| kernels::matmul_a_bt_acc(g, bv, m, n, k, ga));
                send(*b, &mut |gb| kernels::matmul_at_b_acc(av, g, m, k, n, gb));
            }
            Op::AddBias(x, b) => {
                let m = self.value(*b).len();
                send(*x, &mut |gx| add_into(gx, g));
                send(*b, &mut |gb| {
                    for row in g.chunks(m) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                send(*a, &mut |ga| add_into(ga, g));
                send(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |ga| add_into(ga, g));
                send(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, gi)| *o -= gi));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                send(*a, &mut |ga| {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                });
                send(*b, &mut |gb| {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Affine { x, scale } => {
                send(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, gi)| *o += scale * gi));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                send(*x, &mut |gx| {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let s = node.value.data();
                send(*x, &mut |gx| {
                    for ((o, gi), si) in gx.iter_mut().zip(g).zip(s) {
                        *o += gi * si * (1.0 - si);
                    }
                });
            }
            Op::LogClamped(x) => {
                let xv = self.value(*x).data();
                send(*x, &mut |gx| {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        if *xi > LOG_EPS {
                            *o += gi / xi;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.shape()[1];
                let s = node.value.data();
                send(*x, &mut |gx| {
                    for ((orow, grow), srow) in gx.chunks_mut(c).zip(g.chunks(c)).zip(s.chunks(c)) {
                        let dot: f64 = grow.iter().zip(srow).map(|(a, b)| a * b).sum();
                        for ((o, gi), si) in orow.iter_mut().zip(grow).zip(srow) {
                            *o += si * (gi - dot);
                        }
                    }
                });
            }
            Op::ScaleRows { x, w } => {
                let d = self.shape(*x)[1];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                send(*x, &mut |gx| {
                    for ((orow, grow), wi) in gx.chunks_mut(d).zip(g.chunks(d)).zip(wv) {
                        for (o, gi) in orow.iter_mut().zip(grow) {
                            *o += gi * wi;
                        }
                    }
                });
                send(*w, &mut |gw| {
                    for ((o, grow), xrow) in gw.iter_mut().zip(g.chunks(d)).zip(xv.chunks(d)) {
                        *o += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Gather { x, indices } => {
                send(*x, &mut |gx| {
                    for (&idx, gi) in indices.iter().zip(g) {
                        gx[idx] += gi;
                    }
                });
            }
            Op::Sum(x) => {
                send(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                send(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
