//! Training-dynamics simulation toolkit.
//!
//! Predicts, step by step, how the examples in a training curriculum move a
//! model's test metrics, using a featurized n-th order Markov simulator.
//! Reference attribution methods (per-example simulator, TracIn-CP,
//! Grad-Dot), the evaluation protocol and desk-scale synthetic oracles live
//! alongside it.

pub mod baselines;
pub mod cli;
pub mod dynamics;
pub mod embeddings;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod mislabel;
pub mod optim;
pub mod simulator;
pub mod synthetic;

pub use error::{Error, Result};
