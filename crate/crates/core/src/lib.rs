//! Training image classifiers whose adversarial examples look like real
//! data of the attack target: a GAN-style game between a differentiable
//! high-confidence attack (the generator) and a k-output adversary critic,
//! plus the attacks and metrics needed to measure robustness.

pub mod attack;
pub mod autodiff;
pub mod cli;
pub mod critic;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod nn;

pub use error::{Error, Result};
