//! Per-example linear simulator: every training id owns a scalar
//! multiplicative factor `A_i` and an additive factor `B_i`, so
//! `y_t = (sum_{i in c_t} A_i) * y_{t-1} + sum_{i in c_t} B_i`.
//! Ids never seen during fitting cannot be simulated.

use std::collections::HashMap;
use std::ops::Range;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{ExampleId, Run, RunSet, Trajectory};
use crate::error::{Error, Result};
use crate::simulator::trainer::{self, Dataset, FitReport, Trainable};
use crate::simulator::SimulatorConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct SimfluenceParams {
    ids: Vec<ExampleId>,
    index: HashMap<ExampleId, usize>,
    /// `[A_0 .. A_{m-1}, B_0 .. B_{m-1}]`
    data: Vec<f64>,
}

impl SimfluenceParams {
    /// Registers `ids` (sorted, deduplicated) with factors uniform in
    /// `[-1/sqrt(m), 1/sqrt(m)]`, the one-hot analogue of the featurized
    /// initialization.
    pub fn init(ids: impl IntoIterator<Item = ExampleId>, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(ids)?;
        let bound = 1.0 / (params.ids.len() as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in params.data.iter_mut() {
            *v = dist.sample(&mut rng);
        }
        Ok(params)
    }

    pub fn zeros(ids: impl IntoIterator<Item = ExampleId>) -> Result<Self> {
        let mut ids: Vec<ExampleId> = ids.into_iter().collect();
        ids.sort();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::InvalidArgument("no training examples to register".into()));
        }
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let data = vec![0.0; 2 * ids.len()];
        Ok(SimfluenceParams { ids, index, data })
    }

    pub fn ids(&self) -> &[ExampleId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_registered(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    fn slot(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownExample(id.to_string()))
    }

    pub fn multiplicative(&self, id: &str) -> Result<f64> {
        Ok(self.data[self.slot(id)?])
    }

    pub fn additive(&self, id: &str) -> Result<f64> {
        Ok(self.data[self.ids.len() + self.slot(id)?])
    }

    pub fn set(&mut self, id: &str, a: f64, b: f64) -> Result<()> {
        let i = self.slot(id)?;
        let m = self.ids.len();
        self.data[i] = a;
        self.data[m + i] = b;
        Ok(())
    }

    /// Batch factors `(sum A_i, sum B_i)`, summed in batch order.
    pub fn step_factors(&self, batch: &[ExampleId]) -> Result<(f64, f64)> {
        let m = self.ids.len();
        let mut alpha = 0.0;
        let mut beta = 0.0;
        for id in batch {
            let i = self.slot(id.as_str())?;
            alpha += self.data[i];
            beta += self.data[m + i];
        }
        Ok((alpha, beta))
    }
}

struct Simfluence {
    params: SimfluenceParams,
}

struct Features {
    /// Registry slots of each batch, per run and step.
    batches: Vec<Vec<Vec<usize>>>,
    series_run: Vec<usize>,
}

impl Trainable for Simfluence {
    type Features = Features;

    fn featurize(&self, data: &Dataset<'_>) -> Result<Features> {
        let batches = data
            .runs
            .iter()
            .map(|run| {
                run.curriculum
                    .iter()
                    .map(|b| b.iter().map(|id| self.params.slot(id.as_str())).collect())
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(Features {
            batches,
            series_run: data.series.iter().map(|s| s.run).collect(),
        })
    }

    fn order(&self) -> usize {
        1
    }

    fn params(&self) -> &[f64] {
        &self.params.data
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params.data
    }

    fn frozen(&self) -> Option<Range<usize>> {
        None
    }

    fn predict(&self, f: &Features, series: usize, t: usize, history: &[f64]) -> f64 {
        let m = self.params.ids.len();
        let mut alpha = 0.0;
        let mut beta = 0.0;
        for &i in &f.batches[f.series_run[series]][t] {
            alpha += self.params.data[i];
            beta += self.params.data[m + i];
        }
        alpha * history[0] + beta
    }

    fn backprop(&self, f: &Features, series: usize, t: usize, history: &[f64], dpred: f64, grad: &mut [f64]) {
        let m = self.params.ids.len();
        for &i in &f.batches[f.series_run[series]][t] {
            grad[i] += dpred * history[0];
            grad[m + i] += dpred;
        }
    }
}

fn check_order(config: &SimulatorConfig) -> Result<()> {
    if config.order != 1 {
        return Err(Error::InvalidArgument(format!(
            "the per-example simulator is first order; got order {}",
            config.order
        )));
    }
    Ok(())
}

/// Training ids of `train` and `val`: the ids a fit registers.
pub fn registry_ids(train: &RunSet, val: &RunSet) -> Vec<ExampleId> {
    let mut ids = train.train_ids();
    ids.extend(val.train_ids());
    ids.into_iter().collect()
}

/// Fits per-example factors for every training id in `train` and `val`,
/// with the same objective, optimizer, schedule and early stopping as the
/// featurized fit. `config.embed_dim` and `config.proj_dim` are ignored.
pub fn simfluence_fit(train: &RunSet, val: &RunSet, config: &SimulatorConfig) -> Result<(SimfluenceParams, FitReport)> {
    check_order(config)?;
    let init = SimfluenceParams::init(registry_ids(train, val), config.seed)?;
    simfluence_fit_from(train, val, config, init)
}

pub fn simfluence_fit_from(
    train: &RunSet,
    val: &RunSet,
    config: &SimulatorConfig,
    init: SimfluenceParams,
) -> Result<(SimfluenceParams, FitReport)> {
    check_order(config)?;
    let mut model = Simfluence { params: init };
    let report = trainer::train(&mut model, train, val, config)?;
    if model.params.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("fitted factors are not finite".into()));
    }
    Ok((model.params, report))
}

/// First-order rollout seeded with the recorded step-1 value. Fails with
/// [`Error::UnknownExample`] if the curriculum contains an unregistered id.
pub fn simfluence_rollout(
    params: &SimfluenceParams,
    run: &Run,
    test_id: &str,
    metric: &crate::dynamics::MetricKind,
) -> Result<Trajectory> {
    let truth = run.trajectory(test_id, metric).ok_or_else(|| {
        Error::validation(format!(
            "run '{}' has no '{metric}' trajectory for '{test_id}'",
            run.run_id
        ))
    })?;
    let mut values = Vec::with_capacity(run.steps());
    values.push(truth.values[0]);
    for t in 1..run.steps() {
        let (alpha, beta) = params.step_factors(&run.curriculum[t])?;
        values.push(alpha * values[t - 1] + beta);
    }
    Ok(Trajectory {
        test_id: truth.test_id.clone(),
        metric: truth.metric.clone(),
        values,
    })
}

pub fn simfluence_simulate_runs(
    params: &SimfluenceParams,
    runs: &RunSet,
    metric: &crate::dynamics::MetricKind,
) -> Result<RunSet> {
    use rayon::prelude::*;
    let predicted: Vec<Run> = runs
        .runs()
        .par_iter()
        .map(|run| {
            let trajectories = run
                .trajectories_for(metric)
                .map(|tr| simfluence_rollout(params, run, tr.test_id.as_str(), metric))
                .collect::<Result<Vec<_>>>()?;
            Ok(Run {
                run_id: run.run_id.clone(),
                tags: run.tags.clone(),
                curriculum: run.curriculum.clone(),
                trajectories,
            })
        })
        .collect::<Result<_>>()?;
    RunSet::new(predicted)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::dynamics::{id, MetricKind};

    #[allow(clippy::too_many_arguments)]
    fn recurrence_run(name: &str, tags: &[(&str, &str)], a: f64, b: f64, y0: f64, steps: usize, ex: &str, test: &str) -> Run {
        let mut values = vec![y0];
        for t in 1..steps {
            values.push(a * values[t - 1] + b);
        }
        Run::new(
            name,
            tags.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            vec![vec![id(ex)]; steps],
            vec![Trajectory {
                test_id: id(test),
                metric: MetricKind::Loss,
                values,
            }],
        )
        .unwrap()
    }

    fn config() -> SimulatorConfig {
        SimulatorConfig {
            learning_rate: 1e-2,
            warmup_steps: 10,
            max_epochs: 2000,
            batch_size: 16,
            early_stop_patience: 50,
            l2_lambda: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn recovers_planted_recurrence() {
        let run = recurrence_run("r", &[], 0.9, 0.1, 3.0, 60, "a", "t");
        let runs = RunSet::new(vec![run]).unwrap();
        let (params, _) = simfluence_fit(&runs, &runs, &config()).unwrap();
        let a = params.multiplicative("a").unwrap();
        let b = params.additive("a").unwrap();
        assert!((a - 0.9).abs() < 1e-3, "A = {a}");
        assert!((b - 0.1).abs() < 1e-3, "B = {b}");
    }

    #[test]
    fn unregistered_example_is_unknown() {
        let run = recurrence_run("r", &[], 0.9, 0.1, 3.0, 5, "a", "t");
        let params = SimfluenceParams::init([id("z")], 0).unwrap();
        let err = simfluence_rollout(&params, &run, "t", &MetricKind::Loss).unwrap_err();
        assert!(matches!(err, Error::UnknownExample(ref x) if x == "a"));
        assert!(err.to_string().contains("UnknownExample"));
    }

    #[test]
    fn dataset_tags_do_not_matter() {
        let r1 = recurrence_run("r1", &[("dataset", "rte")], 0.9, 0.1, 3.0, 20, "a", "t");
        let r2 = recurrence_run("r2", &[("dataset", "sst2")], 0.8, 0.2, 2.0, 20, "b", "u");
        let mut r1_relabeled = r1.clone();
        r1_relabeled.tags = BTreeMap::from([("dataset".to_string(), "sst2".to_string())]);
        let mut cfg = config();
        cfg.max_epochs = 20;
        let pooled = RunSet::new(vec![r1, r2.clone()]).unwrap();
        let relabeled = RunSet::new(vec![r1_relabeled, r2]).unwrap();
        let (p1, _) = simfluence_fit(&pooled, &pooled, &cfg).unwrap();
        let (p2, _) = simfluence_fit(&relabeled, &relabeled, &cfg).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn rejects_higher_order() {
        let run = recurrence_run("r", &[], 0.9, 0.1, 3.0, 5, "a", "t");
        let runs = RunSet::new(vec![run]).unwrap();
        let mut cfg = config();
        cfg.order = 2;
        assert!(simfluence_fit(&runs, &runs, &cfg).is_err());
    }

    #[test]
    fn rollout_geometric() {
        let run = recurrence_run("r", &[], 0.9, 0.1, 0.0, 4, "a", "t");
        let mut params = SimfluenceParams::zeros([id("a")]).unwrap();
        params.set("a", 0.5, 1.0).unwrap();
        let out = simfluence_rollout(&params, &run, "t", &MetricKind::Loss).unwrap();
        assert_eq!(out.values, vec![0.0, 1.0, 1.5, 1.75]);
    }
}
