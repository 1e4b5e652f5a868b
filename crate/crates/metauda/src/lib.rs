//! Micro-scale unsupervised domain-adaptive object detection trained with
//! online meta-learning of the detector's initial condition, on a synthetic
//! visible-to-thermal benchmark.

pub mod adversarial;
pub mod config;
pub mod autodiff;
pub mod data;
pub mod detector;
mod error;
pub mod eval;
pub mod harness;
pub mod meta;
pub mod nn;
pub mod synth;

pub use error::{Error, Result};
