//! Experiment configuration. Every field has a default, so a config file
//! only lists what it changes.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::losses::{RR_DELTA, RR_RATIO};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Dual-branch training with fused distribution targets.
    #[default]
    Adadf,
    /// Target branch only, plain cross-entropy on the annotated labels.
    Baseline,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Adadf => "adadf",
            Method::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adadf" => Ok(Method::Adadf),
            "baseline" => Ok(Method::Baseline),
            other => Err(Error::config("method", format!("expected adadf or baseline, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub extractor_dims: Vec<usize>,
    pub branch_dims: Vec<usize>,
    pub detach_attention_input: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            extractor_dims: vec![64],
            branch_dims: vec![64, 32],
            detach_attention_input: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSource {
    pub classes: usize,
    pub features: usize,
    pub n_per_class: usize,
    pub ambiguity: f64,
    pub jitter: f64,
    /// Defaults to the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        Self {
            classes: d.classes,
            features: d.features,
            n_per_class: d.n_per_class,
            ambiguity: d.ambiguity,
            jitter: d.jitter,
            seed: None,
        }
    }
}

impl SyntheticSource {
    pub fn resolve(&self, run_seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            classes: self.classes,
            features: self.features,
            n_per_class: self.n_per_class,
            ambiguity: self.ambiguity,
            jitter: self.jitter,
            seed: self.seed.unwrap_or(run_seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    /// Held-out rows. Without it, rows come from the `split` column or, if
    /// that is absent, a seeded 80/20 split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    /// Number of classes; inferred from the labels when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticSource),
    Csv(CsvSource),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSource::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub epochs: u32,
    pub batch_size: usize,
    pub lr0: f64,
    pub gamma: f64,
    pub w_min: f64,
    pub t: f64,
    pub beta: u32,
    pub delta: f64,
    pub ratio: f64,
    pub freeze_extractor: bool,
    /// Fraction of training labels replaced by a different class.
    pub noise_rate: f64,
    /// Positions within the training split whose fusion is traced each epoch.
    pub trace_samples: Vec<usize>,
    pub model: ModelSection,
    pub data: DataSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Adadf,
            seed: 0,
            epochs: 40,
            batch_size: 64,
            lr0: 0.001,
            gamma: 0.9,
            w_min: 0.2,
            t: 0.7,
            beta: 3,
            delta: RR_DELTA,
            ratio: RR_RATIO,
            freeze_extractor: false,
            noise_rate: 0.0,
            trace_samples: (0..5).collect(),
            model: ModelSection::default(),
            data: DataSource::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config {
            field: "<file>".into(),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let unit_open = |v: f64| v > 0.0 && v < 1.0;
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr0", "must be a positive number"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("gamma", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.w_min) {
            return Err(Error::config("w_min", "must lie in [0, 1)"));
        }
        if !unit_open(self.t) {
            return Err(Error::config("t", "must lie in (0, 1)"));
        }
        if self.beta == 0 {
            return Err(Error::config("beta", "must be at least 1"));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::config("delta", "must be nonnegative"));
        }
        if !unit_open(self.ratio) {
            return Err(Error::config("ratio", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::config("noise_rate", "must lie in [0, 1)"));
        }
        if self.model.extractor_dims.is_empty() || self.model.extractor_dims.contains(&0) {
            return Err(Error::config("model.extractor_dims", "must list positive widths"));
        }
        if self.model.branch_dims.is_empty() || self.model.branch_dims.contains(&0) {
            return Err(Error::config("model.branch_dims", "must list positive widths"));
        }
        match &self.data {
            DataSource::Synthetic(s) => s.resolve(self.seed).validate().map_err(|e| match e {
                Error::Config { field, message } => Error::Config {
                    field: format!("data.{field}"),
                    message,
                },
                other => other,
            }),
            DataSource::Csv(c) => match c.classes {
                Some(k) if k < 2 => Err(Error::config("data.classes", "must be at least 2")),
                _ => Ok(()),
            },
        }
    }
}
