//! Dual-branch model: a shared dense extractor feeding an auxiliary and a
//! target branch of identical shape. Each branch ends in a sigmoid attention
//! head that scales its features per sample, followed by a linear classifier.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::distribution::argmax;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub extractor_dims: Vec<usize>,
    pub branch_dims: Vec<usize>,
    pub num_classes: usize,
    pub freeze_extractor: bool,
    pub seed: u64,
    /// Scale branch features by the attention head. Off for the
    /// single-label baseline.
    pub attention: bool,
    /// Feed the attention heads a detached copy of the branch features, so
    /// losses reach the branch only through the classifier path.
    pub detach_attention_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            extractor_dims: vec![64],
            branch_dims: vec![64, 32],
            num_classes: 7,
            freeze_extractor: false,
            seed: 0,
            attention: true,
            detach_attention_input: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be positive"));
        }
        if self.extractor_dims.is_empty() {
            return Err(Error::config("extractor_dims", "must list at least one layer"));
        }
        if self.branch_dims.is_empty() {
            return Err(Error::config("branch_dims", "must list at least one layer"));
        }
        if self.extractor_dims.iter().chain(&self.branch_dims).any(|&d| d == 0) {
            return Err(Error::config("extractor_dims/branch_dims", "widths must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        Ok(())
    }
}

/// Fully connected layer `y = x · weight + bias`, weight stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// Uniform in `±1/sqrt(fan_in)` for weights and bias.
    fn init(fan_in: usize, fan_out: usize, rng: &mut rng::Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("weight shape"),
            bias: Tensor::new(vec![fan_out], draw(fan_out)).expect("bias shape"),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub layers: Vec<Dense>,
    pub attention: Dense,
    pub classifier: Dense,
}

impl Branch {
    fn init(input: usize, dims: &[usize], classes: usize, rng: &mut rng::Rng) -> Self {
        let layers = stack(input, dims, rng);
        let width = *dims.last().expect("nonempty dims");
        Self {
            layers,
            attention: Dense::init(width, 1, rng),
            classifier: Dense::init(width, classes, rng),
        }
    }
}

fn stack(input: usize, dims: &[usize], rng: &mut rng::Rng) -> Vec<Dense> {
    let mut fan_in = input;
    dims.iter()
        .map(|&d| {
            let layer = Dense::init(fan_in, d, rng);
            fan_in = d;
            layer
        })
        .collect()
}

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Extractor,
    AuxBranch,
    AuxAttention,
    AuxClassifier,
    TarBranch,
    TarAttention,
    TarClassifier,
}

impl ParamGroup {
    pub fn is_auxiliary(self) -> bool {
        matches!(self, ParamGroup::AuxBranch | ParamGroup::AuxAttention | ParamGroup::AuxClassifier)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualBranchModel {
    pub config: ModelConfig,
    pub extractor: Vec<Dense>,
    pub aux: Branch,
    pub tar: Branch,
}

/// Values produced by one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    pub p_aux: Tensor,
    pub p_tar: Tensor,
    pub w_aux: Vec<f64>,
    pub w_tar: Vec<f64>,
}

/// Tape handles of one forward pass. `w_aux`/`w_tar` are `n × 1`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub p_aux: Var,
    pub p_tar: Var,
    pub w_aux: Var,
    pub w_tar: Var,
}

/// Model parameters registered as tape leaves, in [`DualBranchModel::parameters`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

struct BranchVars<'a> {
    layers: &'a [Var],
    attention: [Var; 2],
    classifier: [Var; 2],
}

impl DualBranchModel {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, rng::STREAM_MODEL, 0);
        let extractor = stack(config.input_dim, &config.extractor_dims, &mut rng);
        let feat = *config.extractor_dims.last().expect("validated");
        let aux = Branch::init(feat, &config.branch_dims, config.num_classes, &mut rng);
        let tar = Branch::init(feat, &config.branch_dims, config.num_classes, &mut rng);
        Ok(Self {
            config,
            extractor,
            aux,
            tar,
        })
    }

    fn layers(&self) -> Vec<(ParamGroup, &Dense)> {
        let mut out: Vec<(ParamGroup, &Dense)> = Vec::new();
        out.extend(self.extractor.iter().map(|l| (ParamGroup::Extractor, l)));
        for (branch, [body, att, cls]) in [
            (&self.aux, [ParamGroup::AuxBranch, ParamGroup::AuxAttention, ParamGroup::AuxClassifier]),
            (&self.tar, [ParamGroup::TarBranch, ParamGroup::TarAttention, ParamGroup::TarClassifier]),
        ] {
            out.extend(branch.layers.iter().map(|l| (body, l)));
            out.push((att, &branch.attention));
            out.push((cls, &branch.classifier));
        }
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense> {
        let mut out: Vec<&mut Dense> = self.extractor.iter_mut().collect();
        for branch in [&mut self.aux, &mut self.tar] {
            out.extend(branch.layers.iter_mut());
            out.push(&mut branch.attention);
            out.push(&mut branch.classifier);
        }
        out
    }

    /// All parameter tensors in a fixed order (weight then bias per layer).
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers().into_iter().flat_map(|(_, l)| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Group of each entry of [`parameters`](Self::parameters).
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        self.layers().into_iter().flat_map(|(g, _)| [g, g]).collect()
    }

    /// Indices of parameters an optimizer may update.
    pub fn trainable_mask(&self) -> Vec<bool> {
        self.param_groups()
            .into_iter()
            .map(|g| !(self.config.freeze_extractor && g == ParamGroup::Extractor))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Registers every parameter as a leaf; `mask[i]` selects which ones
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, mask: &[bool]) -> BoundParams {
        let vars = self
            .parameters()
            .into_iter()
            .zip(mask)
            .map(|(t, &grad)| tape.leaf(t.clone(), grad))
            .collect();
        BoundParams { vars }
    }

    fn split_vars<'a>(&self, bound: &'a BoundParams) -> (&'a [Var], BranchVars<'a>, BranchVars<'a>) {
        let v = &bound.vars;
        let ne = 2 * self.extractor.len();
        let nb = 2 * self.aux.layers.len();
        let per_branch = nb + 4;
        let branch = |start: usize| BranchVars {
            layers: &v[start..start + nb],
            attention: [v[start + nb], v[start + nb + 1]],
            classifier: [v[start + nb + 2], v[start + nb + 3]],
        };
        (&v[..ne], branch(ne), branch(ne + per_branch))
    }

    fn dense_relu_stack(tape: &mut Tape, mut x: Var, params: &[Var]) -> Result<Var> {
        for wb in params.chunks(2) {
            let h = tape.matmul(x, wb[0])?;
            let h = tape.add_bias(h, wb[1])?;
            x = tape.relu(h);
        }
        Ok(x)
    }

    fn dense(tape: &mut Tape, x: Var, wb: [Var; 2]) -> Result<Var> {
        let h = tape.matmul(x, wb[0])?;
        tape.add_bias(h, wb[1])
    }

    /// Returns `(p, w)` for one branch.
    fn branch_forward(&self, tape: &mut Tape, features: Var, vars: &BranchVars<'_>, attention: bool) -> Result<(Var, Var)> {
        let h = Self::dense_relu_stack(tape, features, vars.layers)?;
        let att_in = if self.config.detach_attention_input {
            let copy = tape.detach(h);
            tape.constant(copy)
        } else {
            h
        };
        let pre = Self::dense(tape, att_in, vars.attention)?;
        let w = tape.sigmoid(pre);
        let scaled = if attention { tape.scale_rows(h, w)? } else { h };
        let logits = Self::dense(tape, scaled, vars.classifier)?;
        Ok((tape.softmax_rows(logits)?, w))
    }

    fn check_batch(&self, tape: &Tape, batch: Var) -> Result<()> {
        let shape = tape.value(batch).shape();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::Dimension {
                op: "forward",
                lhs: shape.to_vec(),
                rhs: vec![0, self.config.input_dim],
            });
        }
        Ok(())
    }

    /// Both branches on one tape.
    pub fn forward_on(&self, tape: &mut Tape, bound: &BoundParams, batch: Var) -> Result<ForwardVars> {
        self.check_batch(tape, batch)?;
        let (ext, aux, tar) = self.split_vars(bound);
        let features = Self::dense_relu_stack(tape, batch, ext)?;
        let attention = self.config.attention;
        let (p_aux, w_aux) = self.branch_forward(tape, features, &aux, attention)?;
        let (p_tar, w_tar) = self.branch_forward(tape, features, &tar, attention)?;
        Ok(ForwardVars {
            p_aux,
            p_tar,
            w_aux,
            w_tar,
        })
    }

    /// Target-branch probabilities only; the auxiliary branch is never read.
    pub fn target_forward_on(&self, tape: &mut Tape, bound: &BoundParams, batch: Var) -> Result<Var> {
        self.check_batch(tape, batch)?;
        let (ext, _, tar) = self.split_vars(bound);
        let features = Self::dense_relu_stack(tape, batch, ext)?;
        let (p_tar, _) = self.branch_forward(tape, features, &tar, self.config.attention)?;
        Ok(p_tar)
    }

    pub fn forward(&self, batch: &Tensor) -> Result<ForwardOutputs> {
        if batch.shape().first() == Some(&0) || batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut tape = Tape::new();
        let mask = vec![false; self.parameters().len()];
        let bound = self.bind(&mut tape, &mask);
        let x = tape.constant(batch.clone());
        let out = self.forward_on(&mut tape, &bound, x)?;
        Ok(ForwardOutputs {
            p_aux: tape.detach(out.p_aux),
            p_tar: tape.detach(out.p_tar),
            w_aux: tape.value(out.w_aux).data().to_vec(),
            w_tar: tape.value(out.w_tar).data().to_vec(),
        })
    }

    /// Target-branch probabilities for a batch.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mask = vec![false; self.parameters().len()];
        let bound = self.bind(&mut tape, &mask);
        let x = tape.constant(batch.clone());
        let p = self.target_forward_on(&mut tape, &bound, x)?;
        Ok(tape.detach(p))
    }

    /// Argmax of the target branch; lowest class index wins ties.
    pub fn inference(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict_proba(batch)?.row_iter().map(argmax).collect())
    }

    /// Sets every auxiliary-branch parameter to zero.
    pub fn zero_auxiliary(&mut self) {
        let groups = self.param_groups();
        for (p, g) in self.parameters_mut().into_iter().zip(groups) {
            if g.is_auxiliary() {
                p.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ADADFCKP";
const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint, all integers little-endian:
///
/// ```text
/// magic "ADADFCKP" | version u32 | config_len u64 | config JSON
/// | meta_len u64 | metadata UTF-8
/// | n_params u64 | per param: rank u64, dims u64 × rank, data f64 × len
/// ```
///
/// The metadata block is free text; the CLI stores the effective run
/// configuration there.
impl DualBranchModel {
    pub fn write_checkpoint<W: Write>(&self, out: W) -> Result<()> {
        self.write_checkpoint_with_metadata("", out)
    }

    pub fn write_checkpoint_with_metadata<W: Write>(&self, metadata: &str, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(&(cfg.len() as u64).to_le_bytes())?;
        out.write_all(&cfg)?;
        out.write_all(&(metadata.len() as u64).to_le_bytes())?;
        out.write_all(metadata.as_bytes())?;
        let params = self.parameters();
        out.write_all(&(params.len() as u64).to_le_bytes())?;
        for p in params {
            out.write_all(&(p.shape().len() as u64).to_le_bytes())?;
            for &d in p.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(input: R) -> Result<Self> {
        Self::read_checkpoint_with_metadata(input).map(|(m, _)| m)
    }

    pub fn read_checkpoint_with_metadata<R: Read>(mut input: R) -> Result<(Self, String)> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let read_u64 = |input: &mut R| -> Result<u64> {
            let mut b8 = [0u8; 8];
            input.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let len = read_u64(&mut input)? as usize;
        let mut cfg = vec![0u8; len];
        input.read_exact(&mut cfg)?;
        let config: ModelConfig = serde_json::from_slice(&cfg).map_err(|e| Error::Format(e.to_string()))?;
        let len = read_u64(&mut input)? as usize;
        let mut meta = vec![0u8; len];
        input.read_exact(&mut meta)?;
        let metadata = String::from_utf8(meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut model = Self::init(config)?;
        let count = read_u64(&mut input)? as usize;
        let mut params = model.parameters_mut();
        if count != params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} tensors, model expects {}",
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let rank = read_u64(&mut input)? as usize;
            let dims = (0..rank).map(|_| read_u64(&mut input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if dims != p.shape() {
                return Err(Error::Format(format!(
                    "tensor shape {dims:?} does not match model shape {:?}",
                    p.shape()
                )));
            }
            let mut b8 = [0u8; 8];
            for v in p.data_mut() {
                input.read_exact(&mut b8)?;
                *v = f64::from_le_bytes(b8);
            }
        }
        Ok((model, metadata))
    }

    pub fn save(&self, path: &Path, metadata: &str) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint_with_metadata(metadata, &mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint_with_metadata(bytes.as_slice())
    }
}
