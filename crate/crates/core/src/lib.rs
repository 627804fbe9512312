//! Deterministic federated-learning simulator built around class-prototype
//! similarity distillation (FedCSD), with the usual comparison methods and
//! drift diagnostics.

pub mod baselines;
pub mod compare;
pub mod config;
pub mod datagen;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod fedcsd;
pub mod format;
pub mod rng;
pub mod tensor_nn;

pub use error::{Error, Result};
