//! Planted data: trajectories iterated from known featurized factors, so a
//! fitted simulator can be scored against an exact answer.
//!
//! Embeddings are `normalize([1, z])` with a random tail `z` of fixed norm; the true
//! projections put their mass on the shared first coordinate, which sets the
//! mean factor per example, plus random rows scaled by `factor_spread`, which
//! make factors vary across examples. Blocks are rescaled so multiplicative
//! factors average `persistence` per step, split geometrically across lags.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{numbered_ids, run_name, sample_curriculum};
use crate::dynamics::{ExampleId, MetricKind, Run, RunSet, Trajectory};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::simulator::{influence_factors, predict_step, step_factors, SimulatorConfig, SimulatorParams};

const TAIL_NORM: f64 = 0.5;
const LAG_DECAY: f64 = 0.6;
/// Test-side spread relative to `factor_spread`; keeps every test example's
/// mean step factor below one.
const TEST_SPREAD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub order: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub pool_size: usize,
    pub test_pool: usize,
    pub per_run: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub noise_sigma: f64,
    pub metric: MetricKind,
    /// Scale of the per-example variation in the true factors.
    pub factor_spread: f64,
    /// Mean total multiplicative factor per step.
    pub persistence: f64,
    /// Fraction of the training pool withheld from [`PlantedWorld::seen`].
    pub unseen_fraction: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            order: 1,
            embed_dim: 16,
            proj_dim: 8,
            pool_size: 200,
            test_pool: 10,
            per_run: 128,
            steps: 96,
            batch_size: 4,
            noise_sigma: 0.0,
            metric: MetricKind::Loss,
            factor_spread: 0.2,
            persistence: 0.9,
            unseen_fraction: 0.0,
        }
    }
}

impl PlantedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.order == 0 || self.embed_dim < 2 || self.proj_dim == 0 {
            return bad(format!(
                "need order >= 1, embed_dim >= 2, proj_dim >= 1 (got {}, {}, {})",
                self.order, self.embed_dim, self.proj_dim
            ));
        }
        if self.steps <= self.order {
            return bad(format!("steps ({}) must exceed order ({})", self.steps, self.order));
        }
        if self.test_pool == 0 || self.batch_size == 0 {
            return bad("test_pool and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.unseen_fraction) {
            return bad(format!("unseen_fraction {} not in [0, 1)", self.unseen_fraction));
        }
        let seen = self.pool_size - self.unseen_count();
        if self.per_run == 0 || self.per_run > seen {
            return bad(format!(
                "per_run ({}) must be in 1..={seen} (seen pool size)",
                self.per_run
            ));
        }
        if self.batch_size > self.per_run {
            return bad(format!(
                "batch_size ({}) exceeds per_run ({})",
                self.batch_size, self.per_run
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.factor_spread.is_finite() && self.factor_spread >= 0.0) {
            return bad(format!("factor_spread must be >= 0, got {}", self.factor_spread));
        }
        if !(self.persistence > 0.0 && self.persistence < 1.0) {
            return bad(format!("persistence must be in (0, 1), got {}", self.persistence));
        }
        Ok(())
    }

    fn unseen_count(&self) -> usize {
        (self.unseen_fraction * self.pool_size as f64).floor() as usize
    }

    /// `(asymptote, low, high)` of the metric's planted trajectories: values
    /// start uniformly in `[low, high]` and relax toward the asymptote.
    fn profile(&self) -> (f64, f64, f64) {
        match self.metric {
            MetricKind::Bleu => (40.0, 2.0, 10.0),
            MetricKind::RougeL => (0.45, 0.05, 0.15),
            MetricKind::Loss | MetricKind::Custom(_) => (1.0, 2.0, 3.0),
        }
    }

    pub fn simulator_config(&self) -> SimulatorConfig {
        SimulatorConfig {
            order: self.order,
            embed_dim: self.embed_dim,
            proj_dim: self.proj_dim,
            metric: self.metric.clone(),
            ..Default::default()
        }
    }
}

/// Example corpus, embeddings and true factors shared by all planted runs.
#[derive(Clone, Debug)]
pub struct PlantedWorld {
    pub config: PlantedConfig,
    pub params: SimulatorParams,
    pub embeddings: EmbeddingTable,
    pub train_ids: Vec<ExampleId>,
    pub test_ids: Vec<ExampleId>,
    /// Training ids runs may draw from by default.
    pub seen: Vec<ExampleId>,
    /// Withheld training ids (sorted).
    pub unseen: Vec<ExampleId>,
    seed: u64,
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `[1, TAIL_NORM * u]` with `u` uniform on the unit sphere.
fn planted_embedding(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    let z: Vec<f64> = (1..d).map(|_| gaussian(rng)).collect();
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut h = Vec::with_capacity(d);
    h.push(1.0);
    h.extend(z.iter().map(|v| TAIL_NORM * v / norm));
    h
}

/// Mean over all (train, test) pairs of each lag factor, then the additive one.
fn mean_factors(
    params: &SimulatorParams,
    emb: &EmbeddingTable,
    train: &[ExampleId],
    test: &[ExampleId],
) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; params.order() + 1];
    for t in test {
        let h_test = emb.require(t.as_str())?;
        for i in train {
            let (a, b) = influence_factors(params, emb.require(i.as_str())?, h_test)?;
            for (s, v) in sums.iter_mut().zip(a.iter().chain([&b])) {
                *s += v;
            }
        }
    }
    let count = (train.len() * test.len()) as f64;
    Ok(sums.into_iter().map(|s| s / count).collect())
}

fn fill_block(block: &mut [f64], p: usize, c: f64, spread: f64, rng: &mut impl Rng) {
    for (idx, v) in block.iter_mut().enumerate() {
        let (k, q) = (idx / p, idx % p);
        *v = match (k, q) {
            (0, 0) => c,
            (0, _) => 0.0,
            _ => gaussian(rng) * spread * c,
        };
    }
}

impl PlantedWorld {
    pub fn new(config: PlantedConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, p, n) = (config.embed_dim, config.proj_dim, config.order);

        let train_ids = numbered_ids("train", config.pool_size);
        let test_ids = numbered_ids("test", config.test_pool);
        let mut embeddings = EmbeddingTable::new(d)?;
        for id in train_ids.iter().chain(&test_ids) {
            embeddings.insert(id.clone(), &planted_embedding(d, &mut rng))?;
        }

        let weights: Vec<f64> = (0..n).map(|j| LAG_DECAY.powi(j as i32)).collect();
        let total: f64 = weights.iter().sum();
        let mut params = SimulatorParams::zeros(config.simulator_config())?;
        let (train_spread, test_spread) = (config.factor_spread, config.factor_spread * TEST_SPREAD);
        for j in 0..n {
            fill_block(params.block_mut_w(j), p, 1.0, train_spread, &mut rng);
            fill_block(params.block_mut_u(j), p, 1.0, test_spread, &mut rng);
        }
        fill_block(params.block_mut_w_add(), p, 1.0, train_spread, &mut rng);
        fill_block(params.block_mut_u_add(), p, 1.0, test_spread, &mut rng);

        // Rescale each (W, U) pair so the mean per-example factor over all
        // (train, test) pairs hits its target exactly.
        let (y_star, _, _) = config.profile();
        let per_example = |share: f64| share / config.batch_size as f64;
        let mut targets: Vec<f64> = weights.iter().map(|w| per_example(config.persistence * w / total)).collect();
        targets.push(per_example((1.0 - config.persistence) * y_star));
        let means = mean_factors(&params, &embeddings, &train_ids, &test_ids)?;
        for (j, (target, mean)) in targets.iter().zip(means).enumerate() {
            if mean <= 0.0 {
                return Err(Error::Numerical(format!(
                    "planted factor block {j} has non-positive mean {mean}; lower factor_spread"
                )));
            }
            let scale = (target / mean).sqrt();
            let (w, u) = if j < n {
                (params.w_block_index(j), params.u_block_index(j))
            } else {
                (params.w_add_block_index(), params.u_add_block_index())
            };
            for b in [w, u] {
                let range = params.block_range(b);
                params.as_mut_slice()[range].iter_mut().for_each(|v| *v *= scale);
            }
        }

        let mut shuffled = train_ids.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let mut unseen = shuffled.split_off(config.pool_size - config.unseen_count());
        let mut seen = shuffled;
        seen.sort();
        unseen.sort();

        Ok(PlantedWorld {
            config,
            params,
            embeddings,
            train_ids,
            test_ids,
            seen,
            unseen,
            seed,
        })
    }

    /// Draws one run from `pool` using `rng`.
    pub fn sample_run(&self, run_id: &str, pool: &[ExampleId], rng: &mut impl Rng) -> Result<Run> {
        let cfg = &self.config;
        if pool.len() < cfg.per_run {
            return Err(Error::InvalidArgument(format!(
                "pool of {} examples cannot supply {} per run",
                pool.len(),
                cfg.per_run
            )));
        }
        let curriculum = sample_curriculum(pool, cfg.per_run, cfg.steps, cfg.batch_size, rng);
        let (_, lo, hi) = cfg.profile();
        let start = Uniform::new_inclusive(lo, hi);
        let n = cfg.order;
        let batches: Vec<Vec<&[f64]>> = curriculum
            .iter()
            .map(|b| b.iter().map(|id| self.embeddings.require(id.as_str())).collect())
            .collect::<Result<_>>()?;
        let mut trajectories = Vec::with_capacity(self.test_ids.len());
        let mut hist = vec![0.0; n];
        for test in &self.test_ids {
            let h_test = self.embeddings.require(test.as_str())?;
            let y1 = start.sample(rng);
            let mut values = vec![y1; n];
            for t in n..cfg.steps {
                let (alpha, beta) = step_factors(&self.params, &batches[t], h_test)?;
                for (j, h) in hist.iter_mut().enumerate() {
                    *h = values[t - 1 - j];
                }
                let mut y = predict_step(&alpha, beta, &hist)?;
                if cfg.noise_sigma > 0.0 {
                    y += cfg.noise_sigma * gaussian(rng);
                }
                values.push(y);
            }
            trajectories.push(Trajectory {
                test_id: test.clone(),
                metric: cfg.metric.clone(),
                values,
            });
        }
        Run::new(run_id, Default::default(), curriculum, trajectories)
    }

    /// Runs `first..first+count`, drawn from `pool`. Run `k` uses its own
    /// random stream, so any run can be regenerated independently and the
    /// result does not depend on the worker count.
    pub fn runs_from(&self, pool: &[ExampleId], first: usize, count: usize) -> Result<RunSet> {
        let runs = (first..first + count)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(k as u64 + 1);
                self.sample_run(&run_name(k), pool, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        RunSet::new(runs)
    }

    /// Runs drawn from the seen pool.
    pub fn runs(&self, count: usize) -> Result<RunSet> {
        self.runs_from(&self.seen, 0, count)
    }
}

/// Planted runs, the embedding table and the true simulator parameters.
pub fn generate_planted_runs(
    config: &PlantedConfig,
    n_runs: usize,
    seed: u64,
) -> Result<(RunSet, EmbeddingTable, SimulatorParams)> {
    let world = PlantedWorld::new(config.clone(), seed)?;
    let runs = world.runs(n_runs)?;
    Ok((runs, world.embeddings, world.params))
}
