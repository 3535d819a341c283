//! Knowledge-distillation laboratory.
//!
//! A small reverse-mode autodiff engine, LeNet-5 and MLP presets, the
//! distillation objective, fidelity metrics, and the experiment protocols that
//! measure how closely a distilled student matches its teacher.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod persist;
pub mod protocols;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
