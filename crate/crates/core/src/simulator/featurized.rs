use std::ops::Range;

use rayon::prelude::*;

use super::factors::{predict_step, step_factors};
use super::trainer::{self, Dataset, FitReport, Trainable};
use super::{SimulatorConfig, SimulatorParams};
use crate::dynamics::{Run, RunSet, Trajectory};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Start from these parameters instead of the seeded initialization.
    pub init: Option<SimulatorParams>,
    /// Keep every test-side projection at its initial value.
    pub freeze_test_side: bool,
}

struct Featurized<'e> {
    params: SimulatorParams,
    emb: &'e EmbeddingTable,
    freeze_test_side: bool,
}

/// Batch embedding sums per (run, step); by linearity of the projections,
/// `alpha_j = <W_j^T sum_i h_i, U_j^T h_test>`.
struct Features {
    run_sums: Vec<Vec<f64>>,
    series_run: Vec<usize>,
    series_test: Vec<usize>,
}

impl Featurized<'_> {
    fn sum_at<'f>(&self, f: &'f Features, series: usize, t: usize) -> (&'f [f64], &[f64]) {
        let d = self.params.embed_dim();
        let sums = &f.run_sums[f.series_run[series]];
        (&sums[t * d..(t + 1) * d], self.emb.row(f.series_test[series]))
    }
}

// <M^T s, N^T h> without allocating, one projection column at a time.
fn bilinear(m: &[f64], n: &[f64], s: &[f64], h: &[f64], p: usize) -> f64 {
    let mut total = 0.0;
    for q in 0..p {
        let mut a = 0.0;
        let mut b = 0.0;
        for k in 0..s.len() {
            a += s[k] * m[k * p + q];
            b += h[k] * n[k * p + q];
        }
        total += a * b;
    }
    total
}

impl Trainable for Featurized<'_> {
    type Features = Features;

    fn featurize(&self, data: &Dataset<'_>) -> Result<Features> {
        let d = self.params.embed_dim();
        let run_sums = data
            .runs
            .iter()
            .map(|run| {
                let mut sums = vec![0.0; run.steps() * d];
                for (t, batch) in run.curriculum.iter().enumerate() {
                    for id in batch {
                        let h = self.emb.require(id.as_str())?;
                        for (acc, v) in sums[t * d..(t + 1) * d].iter_mut().zip(h) {
                            *acc += v;
                        }
                    }
                }
                Ok(sums)
            })
            .collect::<Result<_>>()?;
        let series_test = data
            .series
            .iter()
            .map(|s| {
                self.emb
                    .index_of(s.test_id.as_str())
                    .ok_or_else(|| Error::MissingEmbedding(s.test_id.to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(Features {
            run_sums,
            series_run: data.series.iter().map(|s| s.run).collect(),
            series_test,
        })
    }

    fn order(&self) -> usize {
        self.params.order()
    }

    fn params(&self) -> &[f64] {
        self.params.as_slice()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.params.as_mut_slice()
    }

    fn frozen(&self) -> Option<Range<usize>> {
        self.freeze_test_side.then(|| self.params.test_side())
    }

    fn predict(&self, f: &Features, series: usize, t: usize, history: &[f64]) -> f64 {
        let p = self.params.proj_dim();
        let (s, h) = self.sum_at(f, series, t);
        let mut y = 0.0;
        for (j, &prev) in history.iter().enumerate() {
            y += bilinear(self.params.w(j), self.params.u(j), s, h, p) * prev;
        }
        y + bilinear(self.params.w_add(), self.params.u_add(), s, h, p)
    }

    fn backprop(&self, f: &Features, series: usize, t: usize, history: &[f64], dpred: f64, grad: &mut [f64]) {
        let p = self.params.proj_dim();
        let (s, h) = self.sum_at(f, series, t);
        let mut accumulate = |wb: usize, ub: usize, coef: f64| {
            let w_range = self.params.block_range(wb);
            let u_range = self.params.block_range(ub);
            let (w, u) = (&self.params.as_slice()[w_range.clone()], &self.params.as_slice()[u_range.clone()]);
            for q in 0..p {
                let mut a = 0.0;
                let mut b = 0.0;
                for k in 0..s.len() {
                    a += s[k] * w[k * p + q];
                    b += h[k] * u[k * p + q];
                }
                let gw = coef * b;
                for k in 0..s.len() {
                    grad[w_range.start + k * p + q] += gw * s[k];
                }
                if !self.freeze_test_side {
                    let gu = coef * a;
                    for k in 0..h.len() {
                        grad[u_range.start + k * p + q] += gu * h[k];
                    }
                }
            }
        };
        for (j, &prev) in history.iter().enumerate() {
            accumulate(self.params.w_block_index(j), self.params.u_block_index(j), dpred * prev);
        }
        accumulate(self.params.w_add_block_index(), self.params.u_add_block_index(), dpred);
    }
}

fn check_embeddings(runs: &RunSet, emb: &EmbeddingTable) -> Result<()> {
    for run in runs {
        for id in run.curriculum.iter().flatten().chain(run.trajectories.iter().map(|t| &t.test_id)) {
            emb.require(id.as_str())?;
        }
    }
    Ok(())
}

/// Fits the simulator by teacher-forced L2-regularized regression, returning
/// the parameters of the best validation epoch.
pub fn fit(
    train: &RunSet,
    val: &RunSet,
    emb: &EmbeddingTable,
    config: &SimulatorConfig,
) -> Result<(SimulatorParams, FitReport)> {
    fit_with(train, val, emb, config, FitOptions::default())
}

pub fn fit_with(
    train: &RunSet,
    val: &RunSet,
    emb: &EmbeddingTable,
    config: &SimulatorConfig,
    opts: FitOptions,
) -> Result<(SimulatorParams, FitReport)> {
    config.validate()?;
    if config.embed_dim != emb.dim() {
        return Err(Error::DimensionMismatch {
            expected: config.embed_dim,
            actual: emb.dim(),
        });
    }
    check_embeddings(train, emb)?;
    check_embeddings(val, emb)?;
    let params = match opts.init {
        Some(p) => {
            if p.as_slice().len() != SimulatorParams::zeros(config.clone())?.as_slice().len() {
                return Err(Error::InvalidArgument("initial parameters do not match config shape".into()));
            }
            SimulatorParams {
                config: config.clone(),
                data: p.data,
            }
        }
        None => SimulatorParams::init(config.clone())?,
    };
    let mut model = Featurized {
        params,
        emb,
        freeze_test_side: opts.freeze_test_side,
    };
    let report = trainer::train(&mut model, train, val, config)?;
    if !model.params.is_finite() {
        return Err(Error::Numerical("fitted parameters are not finite".into()));
    }
    Ok((model.params, report))
}

fn full_objective(params: &SimulatorParams, runs: &RunSet, emb: &EmbeddingTable) -> Result<(f64, Vec<f64>)> {
    check_embeddings(runs, emb)?;
    let model = Featurized {
        params: params.clone(),
        emb,
        freeze_test_side: false,
    };
    let data = Dataset::new(runs, params.metric(), params.order())?;
    let f = model.featurize(&data)?;
    Ok(trainer::objective_and_gradient(&model, &f, &data, params.config().l2_lambda))
}

/// `sum_t (y_t - y_hat_t)^2 + lambda ||Theta||^2` over every teacher-forced
/// target in `runs`.
pub fn objective(params: &SimulatorParams, runs: &RunSet, emb: &EmbeddingTable) -> Result<f64> {
    full_objective(params, runs, emb).map(|(v, _)| v)
}

/// Analytic gradient of [`objective`], laid out like `params.as_slice()`.
pub fn objective_gradient(params: &SimulatorParams, runs: &RunSet, emb: &EmbeddingTable) -> Result<Vec<f64>> {
    full_objective(params, runs, emb).map(|(_, g)| g)
}

/// Autoregressive forecast for one test example: steps `1..=n` are copied
/// from the recorded trajectory, later steps feed on earlier predictions.
pub fn rollout(params: &SimulatorParams, run: &Run, emb: &EmbeddingTable, test_id: &str) -> Result<Trajectory> {
    let n = params.order();
    let truth = run.trajectory(test_id, params.metric()).ok_or_else(|| {
        Error::validation(format!(
            "run '{}' has no '{}' trajectory for '{test_id}'",
            run.run_id,
            params.metric()
        ))
    })?;
    if truth.values.len() < n {
        return Err(Error::validation(format!(
            "run '{}': missing seed values; need {n} ground-truth steps",
            run.run_id
        )));
    }
    let h_test = emb.require(test_id)?;
    let mut values = truth.values[..n].to_vec();
    let mut hist = vec![0.0; n];
    for t in n..run.steps() {
        let batch = run.curriculum[t]
            .iter()
            .map(|id| emb.require(id.as_str()))
            .collect::<Result<Vec<_>>>()?;
        let (alpha, beta) = step_factors(params, &batch, h_test)?;
        for (j, h) in hist.iter_mut().enumerate() {
            *h = values[t - 1 - j];
        }
        values.push(predict_step(&alpha, beta, &hist)?);
    }
    Ok(Trajectory {
        test_id: truth.test_id.clone(),
        metric: truth.metric.clone(),
        values,
    })
}

/// Rolls out every trajectory of the model's metric in `runs`. Runs are
/// processed in parallel; output is independent of the worker count.
pub fn simulate_runs(params: &SimulatorParams, runs: &RunSet, emb: &EmbeddingTable) -> Result<RunSet> {
    let predicted: Vec<Run> = runs
        .runs()
        .par_iter()
        .map(|run| {
            let trajectories = run
                .trajectories_for(params.metric())
                .map(|tr| rollout(params, run, emb, tr.test_id.as_str()))
                .collect::<Result<Vec<_>>>()?;
            if trajectories.is_empty() {
                return Err(Error::validation(format!(
                    "missing trajectory: run '{}' has no '{}' trajectory",
                    run.run_id,
                    params.metric()
                )));
            }
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

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dynamics::{id, ExampleId, MetricKind};

    fn small_world(seed: u64, d: usize, t_len: usize) -> (RunSet, EmbeddingTable) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<ExampleId> = (0..6).map(|i| id(&format!("x{i}"))).collect();
        let tests: Vec<ExampleId> = (0..2).map(|i| id(&format!("t{i}"))).collect();
        let mut emb = EmbeddingTable::new(d).unwrap();
        for e in ids.iter().chain(&tests) {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            emb.insert(e.clone(), &v).unwrap();
        }
        let runs = (0..2)
            .map(|r| {
                let curriculum = (0..t_len)
                    .map(|_| (0..2).map(|_| ids[rng.gen_range(0..ids.len())].clone()).collect())
                    .collect();
                let trajectories = tests
                    .iter()
                    .map(|t| Trajectory {
                        test_id: t.clone(),
                        metric: MetricKind::Loss,
                        values: (0..t_len).map(|_| rng.gen_range(0.5..2.0)).collect(),
                    })
                    .collect();
                Run::new(format!("r{r}"), BTreeMap::new(), curriculum, trajectories).unwrap()
            })
            .collect();
        (RunSet::new(runs).unwrap(), emb)
    }

    fn central_difference(params: &SimulatorParams, runs: &RunSet, emb: &EmbeddingTable, i: usize, h: f64) -> f64 {
        let mut plus = params.clone();
        plus.as_mut_slice()[i] += h;
        let mut minus = params.clone();
        minus.as_mut_slice()[i] -= h;
        (objective(&plus, runs, emb).unwrap() - objective(&minus, runs, emb).unwrap()) / (2.0 * h)
    }

    #[test]
    fn gradient_matches_finite_differences_with_shared_projections() {
        let (runs, emb) = small_world(5, 4, 6);
        let config = SimulatorConfig {
            order: 2,
            embed_dim: 4,
            proj_dim: 2,
            share_projections: true,
            l2_lambda: 0.1,
            seed: 3,
            ..Default::default()
        };
        let params = SimulatorParams::init(config).unwrap();
        let grad = objective_gradient(&params, &runs, &emb).unwrap();
        for (i, g) in grad.iter().enumerate() {
            let fd = central_difference(&params, &runs, &emb, i, 1e-5);
            let denom = g.abs().max(fd.abs()).max(1e-6);
            assert!((g - fd).abs() / denom < 1e-4, "entry {i}: {g} vs {fd}");
        }
    }

    #[test]
    fn rollout_constant_factors_is_geometric() {
        // alpha = 0.5 and beta = 1 at every step via d = 1, p = 1 scalars.
        let config = SimulatorConfig {
            order: 1,
            embed_dim: 1,
            proj_dim: 1,
            ..Default::default()
        };
        let params = SimulatorParams::from_parts(config, vec![vec![0.5]], vec![vec![1.0]], vec![1.0], vec![1.0]).unwrap();
        let mut emb = EmbeddingTable::new(1).unwrap();
        emb.insert(id("a"), &[1.0]).unwrap();
        emb.insert(id("t"), &[1.0]).unwrap();
        let run = Run::new(
            "r",
            BTreeMap::new(),
            vec![vec![id("a")]; 4],
            vec![Trajectory {
                test_id: id("t"),
                metric: MetricKind::Loss,
                values: vec![0.0, 9.0, 9.0, 9.0],
            }],
        )
        .unwrap();
        let out = rollout(&params, &run, &emb, "t").unwrap();
        assert_eq!(out.values, vec![0.0, 1.0, 1.5, 1.75]);
    }

    #[test]
    fn rollout_reports_missing_embedding() {
        let (runs, emb_full) = small_world(1, 3, 5);
        let params = SimulatorParams::init(SimulatorConfig {
            embed_dim: 3,
            proj_dim: 2,
            ..Default::default()
        })
        .unwrap();
        let mut emb = EmbeddingTable::new(3).unwrap();
        for (i, v) in emb_full.iter() {
            if i.as_str() != "x0" && i.as_str() != "x1" {
                emb.insert(i.clone(), v).unwrap();
            }
        }
        let run = &runs.runs()[0];
        let err = rollout(&params, run, &emb, "t0").unwrap_err();
        assert!(matches!(err, Error::MissingEmbedding(_)));
    }

    #[test]
    fn fit_errors_are_descriptive() {
        let (runs, emb) = small_world(2, 3, 5);
        let mut config = SimulatorConfig {
            embed_dim: 3,
            proj_dim: 2,
            max_epochs: 2,
            ..Default::default()
        };
        config.metric = MetricKind::Bleu;
        let err = fit(&runs, &runs, &emb, &config).unwrap_err();
        assert!(err.to_string().contains("missing trajectory"));
        config.metric = MetricKind::Loss;
        config.embed_dim = 4;
        assert!(matches!(fit(&runs, &runs, &emb, &config), Err(Error::DimensionMismatch { .. })));
        config.embed_dim = 3;
        let small = EmbeddingTable::from_entries(3, emb.iter().skip(1).map(|(i, v)| (i.clone(), v))).unwrap();
        assert!(matches!(fit(&runs, &runs, &small, &config), Err(Error::MissingEmbedding(_))));
        assert!(fit(&runs, &RunSet::empty(), &emb, &config).is_err());
        config.order = 5;
        assert!(fit(&runs, &runs, &emb, &config).is_err());
    }

    #[test]
    fn fit_is_deterministic() {
        let (runs, emb) = small_world(4, 3, 8);
        let config = SimulatorConfig {
            embed_dim: 3,
            proj_dim: 2,
            max_epochs: 5,
            batch_size: 4,
            learning_rate: 1e-2,
            warmup_steps: 2,
            ..Default::default()
        };
        let a = fit(&runs, &runs, &emb, &config).unwrap();
        let b = fit(&runs, &runs, &emb, &config).unwrap();
        assert_eq!(a.0.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.0.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.1, b.1);
        assert_eq!(a.1.val_all_steps_mse_per_epoch.len(), a.1.epochs_run);
    }

    #[test]
    fn frozen_test_side_never_moves() {
        let (runs, emb) = small_world(6, 3, 8);
        let config = SimulatorConfig {
            embed_dim: 3,
            proj_dim: 2,
            max_epochs: 3,
            batch_size: 4,
            learning_rate: 1e-2,
            warmup_steps: 0,
            ..Default::default()
        };
        let init = SimulatorParams::init(config.clone()).unwrap();
        let (fitted, _) = fit_with(&runs, &runs, &emb, &config, FitOptions { init: Some(init.clone()), freeze_test_side: true }).unwrap();
        let r = init.test_side();
        assert_eq!(&fitted.as_slice()[r.clone()], &init.as_slice()[r]);
        assert_ne!(fitted.as_slice(), init.as_slice());
    }
}
