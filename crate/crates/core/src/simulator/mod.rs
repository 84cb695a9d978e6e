//! Featurized influence simulator.
//!
//! Each training example `i` exerts a lag-`j` multiplicative influence
//! `A[i][j]` and an additive influence `B[i]` on a test example. Both come
//! from frozen embeddings through learned linear projections compared with
//! an inner product:
//!
//! ```text
//! A[i][j] = <W_j^T h_i, U_j^T h_test>      B[i] = <W_add^T h_i, U_add^T h_test>
//! alpha_j(c_t) = sum_{i in c_t} A[i][j]    beta(c_t) = sum_{i in c_t} B[i]
//! y_t = sum_j alpha_j(c_t) * y_{t-j} + beta(c_t)
//! ```

mod factors;
mod featurized;
mod model_io;
pub(crate) mod trainer;

use std::ops::Range;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::MetricKind;
use crate::error::{Error, Result};

pub use factors::{influence_factors, predict_step, step_factors};
pub use featurized::{
    fit, fit_with, objective, objective_gradient, rollout, simulate_runs, FitOptions,
};
pub use model_io::{load_model, model_from_json, model_to_json, save_model, MODEL_FORMAT_VERSION};
pub use trainer::FitReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorConfig {
    /// Markov order `n`.
    pub order: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
    /// Tie the train-side projections `W_j` across lags.
    #[serde(default)]
    pub share_projections: bool,
    pub l2_lambda: f64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub max_epochs: usize,
    /// Training targets per optimizer step.
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub metric: MetricKind,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            order: 1,
            // all-MiniLM-L6-v2 output width
            embed_dim: 384,
            proj_dim: 64,
            share_projections: false,
            l2_lambda: 1e-5,
            learning_rate: 1e-4,
            warmup_steps: 200,
            max_epochs: 300,
            batch_size: 128,
            early_stop_patience: 10,
            seed: 42,
            metric: MetricKind::Loss,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.order == 0 {
            return bad("order must be >= 1");
        }
        if self.embed_dim == 0 || self.proj_dim == 0 {
            return bad("embed_dim and proj_dim must be >= 1");
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad("l2_lambda must be finite and >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and > 0");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be >= 1");
        }
        Ok(())
    }
}

/// Learned projections. Stored as one flat buffer laid out as
/// `[W_0 .. W_{m-1}, W_add, U_0 .. U_{n-1}, U_add]`, each block a row-major
/// `d x p` matrix (`m = 1` when projections are shared, else `n`). The
/// train side is therefore a prefix and the test side a suffix.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatorParams {
    config: SimulatorConfig,
    data: Vec<f64>,
}

impl SimulatorParams {
    fn block_len(config: &SimulatorConfig) -> usize {
        config.embed_dim * config.proj_dim
    }

    fn train_blocks(config: &SimulatorConfig) -> usize {
        if config.share_projections {
            1
        } else {
            config.order
        }
    }

    fn total_len(config: &SimulatorConfig) -> usize {
        (Self::train_blocks(config) + 1 + config.order + 1) * Self::block_len(config)
    }

    pub fn zeros(config: SimulatorConfig) -> Result<Self> {
        config.validate()?;
        let len = Self::total_len(&config);
        Ok(SimulatorParams {
            config,
            data: vec![0.0; len],
        })
    }

    /// Entries i.i.d. uniform in `[-1/sqrt(d), 1/sqrt(d)]`, seeded by `config.seed`.
    pub fn init(config: SimulatorConfig) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let bound = 1.0 / (params.config.embed_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let mut rng = ChaCha8Rng::seed_from_u64(params.config.seed);
        for v in params.data.iter_mut() {
            *v = dist.sample(&mut rng);
        }
        Ok(params)
    }

    /// Assembles parameters from explicit matrices (each flat row-major `d x p`).
    pub fn from_parts(
        config: SimulatorConfig,
        w: Vec<Vec<f64>>,
        u: Vec<Vec<f64>>,
        w_add: Vec<f64>,
        u_add: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let block = Self::block_len(&config);
        if w.len() != Self::train_blocks(&config) || u.len() != config.order {
            return Err(Error::validation(format!(
                "expected {} W and {} U matrices, got {} and {}",
                Self::train_blocks(&config),
                config.order,
                w.len(),
                u.len()
            )));
        }
        let mut data = Vec::with_capacity(Self::total_len(&config));
        for m in w.iter().chain(std::iter::once(&w_add)).chain(u.iter()).chain(std::iter::once(&u_add)) {
            if m.len() != block {
                return Err(Error::DimensionMismatch {
                    expected: block,
                    actual: m.len(),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("projection matrices must be finite"));
            }
            data.extend_from_slice(m);
        }
        Ok(SimulatorParams { config, data })
    }

    pub fn config(&self) -> &SimulatorConfig {
        &self.config
    }

    pub fn order(&self) -> usize {
        self.config.order
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn proj_dim(&self) -> usize {
        self.config.proj_dim
    }

    pub fn metric(&self) -> &MetricKind {
        &self.config.metric
    }

    fn block(&self, b: usize) -> &[f64] {
        let len = Self::block_len(&self.config);
        &self.data[b * len..(b + 1) * len]
    }

    pub(crate) fn w_block_index(&self, lag: usize) -> usize {
        if self.config.share_projections {
            0
        } else {
            lag
        }
    }

    pub(crate) fn w_add_block_index(&self) -> usize {
        Self::train_blocks(&self.config)
    }

    pub(crate) fn u_block_index(&self, lag: usize) -> usize {
        Self::train_blocks(&self.config) + 1 + lag
    }

    pub(crate) fn u_add_block_index(&self) -> usize {
        Self::train_blocks(&self.config) + 1 + self.config.order
    }

    pub(crate) fn block_range(&self, b: usize) -> Range<usize> {
        let len = Self::block_len(&self.config);
        b * len..(b + 1) * len
    }

    /// Train-side projection for 0-based lag `lag` (lag 0 multiplies `y_{t-1}`).
    pub fn w(&self, lag: usize) -> &[f64] {
        self.block(self.w_block_index(lag))
    }

    pub fn u(&self, lag: usize) -> &[f64] {
        self.block(self.u_block_index(lag))
    }

    pub fn w_add(&self) -> &[f64] {
        self.block(self.w_add_block_index())
    }

    pub fn u_add(&self) -> &[f64] {
        self.block(self.u_add_block_index())
    }

    /// Number of distinct train-side `W` blocks (1 when shared).
    pub fn w_count(&self) -> usize {
        Self::train_blocks(&self.config)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Mutable access to one block, used by tests and the reduction mapping.
    pub fn block_mut_w(&mut self, lag: usize) -> &mut [f64] {
        let r = self.block_range(self.w_block_index(lag));
        &mut self.data[r]
    }

    pub fn block_mut_u(&mut self, lag: usize) -> &mut [f64] {
        let r = self.block_range(self.u_block_index(lag));
        &mut self.data[r]
    }

    pub fn block_mut_w_add(&mut self) -> &mut [f64] {
        let r = self.block_range(self.w_add_block_index());
        &mut self.data[r]
    }

    pub fn block_mut_u_add(&mut self) -> &mut [f64] {
        let r = self.block_range(self.u_add_block_index());
        &mut self.data[r]
    }

    /// Index range of every test-side (`U`) entry.
    pub(crate) fn test_side(&self) -> Range<usize> {
        let len = Self::block_len(&self.config);
        self.u_block_index(0) * len..self.data.len()
    }

    /// `||Theta||^2` over all four projection families.
    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
