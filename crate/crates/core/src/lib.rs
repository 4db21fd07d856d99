//! Dual-branch adaptive label-distribution-fusion training on a small
//! reverse-mode autodiff core.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod distribution;
pub mod error;
pub mod losses;
pub mod network;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
