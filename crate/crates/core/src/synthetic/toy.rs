//! Softmax regression trained with plain SGD on synthetic Gaussian clusters.
//!
//! The per-example loss is cross-entropy on `theta x` with `theta` a
//! `classes x features` matrix and no bias, so the gradient is the outer
//! product `(softmax(theta x) - e_y) x^T` and gradient dot products factor
//! as `<g_a, g_b> <x_a, x_b>`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{numbered_ids, run_name, sample_curriculum};
use crate::baselines::{Checkpoint, GradientDump};
use crate::dynamics::{ExampleId, MetricKind, Run, RunSet, Trajectory};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};

const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub classes: usize,
    pub features: usize,
    pub pool_size: usize,
    pub test_pool: usize,
    pub per_run: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Distance of each class center from the origin, relative to the noise.
    pub separation: f64,
    /// Dump gradient dots at steps `1, 1 + k, 1 + 2k, ...`; 0 disables.
    pub checkpoint_interval: usize,
    /// Also record each training example's dot with itself.
    pub self_pairs: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            classes: 3,
            features: 16,
            pool_size: 200,
            test_pool: 10,
            per_run: 128,
            steps: 96,
            batch_size: 4,
            learning_rate: 0.05,
            separation: 1.0,
            checkpoint_interval: 10,
            self_pairs: false,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.classes < 2 || self.features == 0 {
            return bad(format!(
                "need at least 2 classes and 1 feature (got {}, {})",
                self.classes, self.features
            ));
        }
        if self.steps == 0 || self.batch_size == 0 || self.test_pool == 0 {
            return bad("steps, batch_size and test_pool must be positive".into());
        }
        if self.per_run == 0 || self.per_run > self.pool_size {
            return bad(format!(
                "per_run ({}) must be in 1..={}",
                self.per_run, self.pool_size
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !self.separation.is_finite() {
            return bad("separation must be finite".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyExample {
    pub id: ExampleId,
    /// Unit-norm feature vector.
    pub x: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub classes: usize,
    pub features: usize,
    pub train: Vec<ToyExample>,
    pub test: Vec<ToyExample>,
    index: HashMap<ExampleId, (bool, usize)>,
}

impl ToyDataset {
    pub fn new(classes: usize, features: usize, train: Vec<ToyExample>, test: Vec<ToyExample>) -> Result<Self> {
        let mut index = HashMap::new();
        for (is_test, set) in [(false, &train), (true, &test)] {
            for (i, ex) in set.iter().enumerate() {
                if ex.x.len() != features {
                    return Err(Error::DimensionMismatch {
                        expected: features,
                        actual: ex.x.len(),
                    });
                }
                if ex.label >= classes {
                    return Err(Error::validation(format!(
                        "example '{}' has label {} with {classes} classes",
                        ex.id, ex.label
                    )));
                }
                if index.insert(ex.id.clone(), (is_test, i)).is_some() {
                    return Err(Error::validation(format!("duplicate example id '{}'", ex.id)));
                }
            }
        }
        Ok(ToyDataset {
            classes,
            features,
            train,
            test,
            index,
        })
    }

    pub fn example(&self, id: &str) -> Option<&ToyExample> {
        self.index.get(id).map(|&(is_test, i)| if is_test { &self.test[i] } else { &self.train[i] })
    }

    fn require(&self, id: &str) -> Result<&ToyExample> {
        self.example(id).ok_or_else(|| Error::UnknownExample(id.to_string()))
    }

    pub fn train_ids(&self) -> Vec<ExampleId> {
        self.train.iter().map(|e| e.id.clone()).collect()
    }

    /// Feature vectors of every example, keyed by id.
    pub fn embeddings(&self) -> Result<EmbeddingTable> {
        let mut table = EmbeddingTable::new(self.features)?;
        for ex in self.train.iter().chain(&self.test) {
            table.insert(ex.id.clone(), &ex.x)?;
        }
        Ok(table)
    }

    fn with_train_labels(&self, labels: &BTreeMap<ExampleId, usize>) -> ToyDataset {
        let mut out = self.clone();
        for ex in out.train.iter_mut() {
            if let Some(&y) = labels.get(&ex.id) {
                ex.label = y;
            }
        }
        out
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn gaussian_vec(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Balanced Gaussian clusters around random unit class centers, projected
/// onto the unit sphere. Labels cycle through the classes.
pub fn make_toy_dataset(cfg: &ToyConfig, seed: u64) -> Result<ToyDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.features;
    let centers: Vec<Vec<f64>> = (0..cfg.classes).map(|_| unit(gaussian_vec(d, &mut rng))).collect();
    let noise = 1.0 / (d as f64).sqrt();
    let mut draw = |ids: Vec<ExampleId>| -> Vec<ToyExample> {
        ids.into_iter()
            .enumerate()
            .map(|(i, id)| {
                let label = i % cfg.classes;
                let z = gaussian_vec(d, &mut rng);
                let x = unit(
                    centers[label]
                        .iter()
                        .zip(z)
                        .map(|(c, z)| cfg.separation * c + noise * z)
                        .collect(),
                );
                ToyExample { id, x, label }
            })
            .collect()
    };
    let train = draw(numbered_ids("train", cfg.pool_size));
    let test = draw(numbered_ids("test", cfg.test_pool));
    ToyDataset::new(cfg.classes, d, train, test)
}

/// Flips exactly `floor(rho * N)` training labels to a different class.
/// Returns the corrupted dataset and the flipped ids.
pub fn corrupt_labels(data: &ToyDataset, rho: f64, seed: u64) -> Result<(ToyDataset, BTreeSet<ExampleId>)> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("corruption fraction {rho} not in [0, 1]")));
    }
    let n_flip = (rho * data.train.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = (0..data.train.len()).choose_multiple(&mut rng, n_flip);
    let mut out = data.clone();
    let mut flipped = BTreeSet::new();
    for i in picked {
        let ex = &mut out.train[i];
        let shift = 1 + rng.gen_range(0..data.classes - 1);
        ex.label = (ex.label + shift) % data.classes;
        flipped.insert(ex.id.clone());
    }
    Ok((out, flipped))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    classes: usize,
    features: usize,
    /// Row-major `classes x features`.
    theta: Vec<f64>,
}

impl ToyModel {
    pub fn new(classes: usize, features: usize) -> Self {
        ToyModel {
            classes,
            features,
            theta: vec![0.0; classes * features],
        }
    }

    pub fn from_theta(classes: usize, features: usize, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != classes * features {
            return Err(Error::DimensionMismatch {
                expected: classes * features,
                actual: theta.len(),
            });
        }
        Ok(ToyModel { classes, features, theta })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.theta
            .chunks_exact(self.features)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        let z = self.logits(x);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Cross-entropy `logsumexp(theta x) - (theta x)_y`.
    pub fn loss(&self, ex: &ToyExample) -> f64 {
        let z = self.logits(&ex.x);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        lse - z[ex.label]
    }

    /// `softmax(theta x) - e_y`.
    pub fn error_signal(&self, ex: &ToyExample) -> Vec<f64> {
        let mut g = self.probs(&ex.x);
        g[ex.label] -= 1.0;
        g
    }

    /// Full gradient of the loss with respect to `theta`, row-major.
    pub fn gradient(&self, ex: &ToyExample) -> Vec<f64> {
        let g = self.error_signal(ex);
        g.iter().flat_map(|gc| ex.x.iter().map(move |x| gc * x)).collect()
    }

    pub fn grad_dot(&self, a: &ToyExample, b: &ToyExample) -> f64 {
        let ga = self.error_signal(a);
        let gb = self.error_signal(b);
        let g: f64 = ga.iter().zip(&gb).map(|(u, v)| u * v).sum();
        let x: f64 = a.x.iter().zip(&b.x).map(|(u, v)| u * v).sum();
        g * x
    }

    /// `theta -= lr * sum_i grad L(z_i)` over the batch.
    pub fn sgd_step(&mut self, batch: &[&ToyExample], lr: f64) {
        let mut grad = vec![0.0; self.theta.len()];
        for ex in batch {
            for (acc, v) in grad.iter_mut().zip(self.gradient(ex)) {
                *acc += v;
            }
        }
        for (t, g) in self.theta.iter_mut().zip(grad) {
            *t -= lr * g;
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        (0..z.len()).fold(0, |best, c| if z[c] > z[best] { c } else { best })
    }

    pub fn accuracy(&self, examples: &[ToyExample]) -> f64 {
        let hits = examples.iter().filter(|e| self.predict(&e.x) == e.label).count();
        hits as f64 / examples.len() as f64
    }
}

/// One trained toy run with its gradient records.
#[derive(Clone, Debug)]
pub struct ToyRunRecord {
    pub run: Run,
    /// Checkpointed dots at the configured interval, if any.
    pub dump: Option<GradientDump>,
    /// Dots of the trained model, labeled step `T + 1`.
    pub final_dump: GradientDump,
    /// Model at each checkpoint step `s` (parameters before batch `s`), plus
    /// the trained model at `T + 1`.
    pub snapshots: Vec<(usize, ToyModel)>,
}

fn checkpoint(
    model: &ToyModel,
    step: usize,
    lr: f64,
    train: &[&ToyExample],
    test: &[ToyExample],
    self_pairs: bool,
) -> Checkpoint {
    let mut dots = BTreeMap::new();
    for a in train {
        for b in test {
            dots.insert((a.id.clone(), b.id.clone()), model.grad_dot(a, b));
        }
        if self_pairs {
            dots.insert((a.id.clone(), a.id.clone()), model.grad_dot(a, a));
        }
    }
    Checkpoint { step, lr, dots }
}

/// Trains a fresh model along `curriculum`, recording every test example's
/// loss after each update.
pub fn train_toy_run(data: &ToyDataset, run_id: &str, curriculum: &[Vec<ExampleId>], cfg: &ToyConfig) -> Result<ToyRunRecord> {
    let batches: Vec<Vec<&ToyExample>> = curriculum
        .iter()
        .map(|b| b.iter().map(|id| data.require(id.as_str())).collect())
        .collect::<Result<_>>()?;
    let mut seen: Vec<&ToyExample> = batches.iter().flatten().copied().collect();
    seen.sort_by(|a, b| a.id.cmp(&b.id));
    seen.dedup_by(|a, b| a.id == b.id);

    let lr = cfg.learning_rate;
    let mut model = ToyModel::new(data.classes, data.features);
    let mut losses = vec![Vec::with_capacity(batches.len()); data.test.len()];
    let mut checkpoints = Vec::new();
    let mut snapshots = Vec::new();
    for (t, batch) in batches.iter().enumerate() {
        let step = t + 1;
        if cfg.checkpoint_interval > 0 && t % cfg.checkpoint_interval == 0 {
            checkpoints.push(checkpoint(&model, step, lr, &seen, &data.test, cfg.self_pairs));
            snapshots.push((step, model.clone()));
        }
        model.sgd_step(batch, lr);
        for (ex, out) in data.test.iter().zip(losses.iter_mut()) {
            let l = model.loss(ex);
            if !(l.is_finite() && l <= DIVERGENCE_LOSS) {
                return Err(Error::Numerical(format!(
                    "toy training diverged in run '{run_id}' at step {step}: loss {l} on '{}'",
                    ex.id
                )));
            }
            out.push(l);
        }
    }
    let final_step = batches.len() + 1;
    let final_dump = GradientDump::new(vec![checkpoint(&model, final_step, lr, &seen, &data.test, cfg.self_pairs)])?;
    snapshots.push((final_step, model));
    let dump = if checkpoints.is_empty() {
        None
    } else {
        Some(GradientDump::new(checkpoints)?)
    };
    let trajectories = data
        .test
        .iter()
        .zip(losses)
        .map(|(ex, values)| Trajectory {
            test_id: ex.id.clone(),
            metric: MetricKind::Loss,
            values,
        })
        .collect();
    Ok(ToyRunRecord {
        run: Run::new(run_id, Default::default(), curriculum.to_vec(), trajectories)?,
        dump,
        final_dump,
        snapshots,
    })
}

#[derive(Clone, Debug)]
pub struct ToyOutput {
    pub dataset: ToyDataset,
    pub embeddings: EmbeddingTable,
    pub runs: RunSet,
    /// One record per run, in run order.
    pub records: Vec<ToyRunRecord>,
}

/// Trains `n_runs` toy runs on `data`; run `k` samples its curriculum from
/// its own random stream.
pub fn toy_runs_on(data: &ToyDataset, cfg: &ToyConfig, n_runs: usize, seed: u64) -> Result<ToyOutput> {
    cfg.validate()?;
    let pool = data.train_ids();
    if cfg.per_run > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "per_run ({}) exceeds the {} training examples",
            cfg.per_run,
            pool.len()
        )));
    }
    let records = (0..n_runs)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let curriculum = sample_curriculum(&pool, cfg.per_run, cfg.steps, cfg.batch_size, &mut rng);
            train_toy_run(data, &run_name(k), &curriculum, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyOutput {
        dataset: data.clone(),
        embeddings: data.embeddings()?,
        runs: RunSet::new(records.iter().map(|r| r.run.clone()).collect())?,
        records,
    })
}

/// Builds the dataset from `seed` and trains `n_runs` runs on it.
pub fn generate_toy_runs(cfg: &ToyConfig, n_runs: usize, seed: u64) -> Result<ToyOutput> {
    let data = make_toy_dataset(cfg, seed)?;
    toy_runs_on(&data, cfg, n_runs, seed)
}

/// Plain SGD over shuffled passes of the full training set.
pub fn fit_toy_classifier(data: &ToyDataset, epochs: usize, batch_size: usize, lr: f64, seed: u64) -> Result<ToyModel> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ToyModel::new(data.classes, data.features);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&ToyExample> = chunk.iter().map(|&i| &data.train[i]).collect();
            model.sgd_step(&batch, lr);
        }
    }
    if !model.theta.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("toy classifier diverged".into()));
    }
    Ok(model)
}

/// Copy of `corrupted` with the labels of `fixed` restored from `clean`.
pub fn restore_labels(corrupted: &ToyDataset, clean: &ToyDataset, fixed: &BTreeSet<ExampleId>) -> Result<ToyDataset> {
    let labels = fixed
        .iter()
        .map(|id| Ok((id.clone(), clean.require(id.as_str())?.label)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(corrupted.with_train_labels(&labels))
}
