//! Teacher-forced fitting loop shared by the featurized simulator and the
//! per-example baseline. Models plug in through [`Trainable`]; the loop owns
//! target enumeration, shuffling, the optimizer and early stopping.

use std::ops::Range;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimulatorConfig;
use crate::dynamics::{ExampleId, MetricKind, RunSet};
use crate::error::{Error, Result};
use crate::optim::{AdamW, LinearSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs_run: usize,
    /// Mean squared teacher-forced residual over all targets, per epoch.
    pub train_loss_per_epoch: Vec<f64>,
    /// Mean all-steps rollout MSE over validation trajectories, per epoch.
    pub val_all_steps_mse_per_epoch: Vec<f64>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// One (run, test example) trajectory of the fitted metric.
pub(crate) struct Series<'a> {
    pub run: usize,
    pub test_id: &'a ExampleId,
    pub values: &'a [f64],
}

pub(crate) struct Dataset<'a> {
    pub runs: &'a RunSet,
    pub series: Vec<Series<'a>>,
}

impl<'a> Dataset<'a> {
    pub fn new(runs: &'a RunSet, metric: &MetricKind, order: usize) -> Result<Self> {
        let mut series = Vec::new();
        for (r, run) in runs.iter().enumerate() {
            if run.steps() <= order {
                return Err(Error::validation(format!(
                    "run '{}' has {} steps; order {order} needs more than {order}",
                    run.run_id,
                    run.steps()
                )));
            }
            let before = series.len();
            series.extend(run.trajectories_for(metric).map(|tr| Series {
                run: r,
                test_id: &tr.test_id,
                values: &tr.values,
            }));
            if series.len() == before {
                return Err(Error::validation(format!(
                    "missing trajectory: run '{}' has no '{metric}' trajectory",
                    run.run_id
                )));
            }
        }
        Ok(Dataset { runs, series })
    }
}

pub(crate) trait Trainable {
    type Features: Sync;

    fn featurize(&self, data: &Dataset<'_>) -> Result<Self::Features>;
    fn order(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// Entries excluded from updates and from the L2 penalty.
    fn frozen(&self) -> Option<Range<usize>>;
    /// Prediction for 0-based step `t` of `series`; `history` is most recent first.
    fn predict(&self, f: &Self::Features, series: usize, t: usize, history: &[f64]) -> f64;
    /// Adds `dpred * d(prediction)/d(theta)` into `grad`.
    fn backprop(
        &self,
        f: &Self::Features,
        series: usize,
        t: usize,
        history: &[f64],
        dpred: f64,
        grad: &mut [f64],
    );
}

fn fill_history(values: &[f64], t: usize, out: &mut [f64]) {
    for (j, h) in out.iter_mut().enumerate() {
        *h = values[t - 1 - j];
    }
}

/// Autoregressive rollout using the model's own predictions after the seed steps.
pub(crate) fn rollout_series<M: Trainable>(model: &M, f: &M::Features, s: usize, values: &[f64]) -> Vec<f64> {
    let n = model.order();
    let mut out = values[..n].to_vec();
    let mut hist = vec![0.0; n];
    for t in n..values.len() {
        fill_history(&out, t, &mut hist);
        out.push(model.predict(f, s, t, &hist));
    }
    out
}

fn window_mse(pred: &[f64], truth: &[f64], n: usize) -> f64 {
    let m = truth.len() - n;
    pred[n..].iter().zip(&truth[n..]).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / m as f64
}

fn validation_mse<M: Trainable>(model: &M, f: &M::Features, data: &Dataset<'_>) -> f64 {
    let n = model.order();
    let total: f64 = data
        .series
        .iter()
        .enumerate()
        .map(|(s, ser)| window_mse(&rollout_series(model, f, s, ser.values), ser.values, n))
        .sum();
    let mse = total / data.series.len() as f64;
    if mse.is_finite() {
        mse
    } else {
        f64::INFINITY
    }
}

/// Full-batch objective `sum (y - y_hat)^2 + lambda * ||theta||^2` and its gradient.
pub(crate) fn objective_and_gradient<M: Trainable>(
    model: &M,
    f: &M::Features,
    data: &Dataset<'_>,
    lambda: f64,
) -> (f64, Vec<f64>) {
    let n = model.order();
    let mut grad = vec![0.0; model.params().len()];
    let mut hist = vec![0.0; n];
    let mut loss = 0.0;
    for (s, ser) in data.series.iter().enumerate() {
        for t in n..ser.values.len() {
            fill_history(ser.values, t, &mut hist);
            let r = model.predict(f, s, t, &hist) - ser.values[t];
            loss += r * r;
            model.backprop(f, s, t, &hist, 2.0 * r, &mut grad);
        }
    }
    let frozen = model.frozen();
    for (i, (g, p)) in grad.iter_mut().zip(model.params()).enumerate() {
        if frozen.as_ref().is_some_and(|r| r.contains(&i)) {
            *g = 0.0;
            continue;
        }
        loss += lambda * p * p;
        *g += 2.0 * lambda * p;
    }
    (loss, grad)
}

pub(crate) fn train<M: Trainable>(
    model: &mut M,
    train: &RunSet,
    val: &RunSet,
    cfg: &SimulatorConfig,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training runs".into()));
    }
    if val.is_empty() {
        return Err(Error::InvalidArgument(
            "no validation runs; early stopping needs at least one".into(),
        ));
    }
    let n = model.order();
    let data_tr = Dataset::new(train, &cfg.metric, n)?;
    let data_va = Dataset::new(val, &cfg.metric, n)?;
    let f_tr = model.featurize(&data_tr)?;
    let f_va = model.featurize(&data_va)?;

    let mut targets: Vec<(u32, u32)> = data_tr
        .series
        .iter()
        .enumerate()
        .flat_map(|(s, ser)| (n..ser.values.len()).map(move |t| (s as u32, t as u32)))
        .collect();
    let n_targets = targets.len();
    let steps_per_epoch = n_targets.div_ceil(cfg.batch_size);
    let schedule = LinearSchedule {
        peak: cfg.learning_rate,
        warmup: cfg.warmup_steps,
        total: steps_per_epoch * cfg.max_epochs,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(model.params().len());
    let frozen = model.frozen();
    let mut grad = vec![0.0; model.params().len()];
    let mut hist = vec![0.0; n];

    let mut report = FitReport {
        epochs_run: 0,
        train_loss_per_epoch: Vec::new(),
        val_all_steps_mse_per_epoch: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut since_best = 0usize;
    let mut update = 0usize;

    for epoch in 1..=cfg.max_epochs {
        targets.shuffle(&mut rng);
        let mut epoch_sse = 0.0;
        for (b, chunk) in targets.chunks(cfg.batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut sse = 0.0;
            for &(s, t) in chunk {
                let (s, t) = (s as usize, t as usize);
                let values = data_tr.series[s].values;
                fill_history(values, t, &mut hist);
                let r = model.predict(&f_tr, s, t, &hist) - values[t];
                sse += r * r;
                model.backprop(&f_tr, s, t, &hist, 2.0 * r, &mut grad);
            }
            if !sse.is_finite() {
                return Err(Error::Numerical(format!(
                    "NaN loss at epoch {epoch}, step {}",
                    b + 1
                )));
            }
            epoch_sse += sse;
            if cfg.l2_lambda > 0.0 {
                for (i, (g, p)) in grad.iter_mut().zip(model.params()).enumerate() {
                    if !frozen.as_ref().is_some_and(|r| r.contains(&i)) {
                        *g += 2.0 * cfg.l2_lambda * p;
                    }
                }
            }
            opt.step(model.params_mut(), &grad, schedule.lr(update), frozen.clone());
            update += 1;
        }
        let train_loss = epoch_sse / n_targets as f64;
        let val_mse = validation_mse(model, &f_va, &data_va);
        report.train_loss_per_epoch.push(train_loss);
        report.val_all_steps_mse_per_epoch.push(val_mse);
        report.epochs_run = epoch;
        debug!("epoch {epoch}: train {train_loss:.6e} val {val_mse:.6e}");

        if best.as_ref().is_none_or(|(b, _)| val_mse < *b) {
            best = Some((val_mse, model.params().to_vec()));
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        model.params_mut().copy_from_slice(&params);
    }
    info!(
        "fit finished after {} epochs (best {}, val mse {:.6e})",
        report.epochs_run,
        report.best_epoch,
        report.val_all_steps_mse_per_epoch[report.best_epoch - 1]
    );
    Ok(report)
}
