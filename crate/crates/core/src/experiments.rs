//! End-to-end studies built from the library pieces: the one-hot reduction
//! to the per-example simulator, checkpoint-interval and Markov-order
//! sweeps, and held-out generalization to never-trained examples.

use std::collections::BTreeSet;
use std::io::Write;

use log::info;
use serde::{Deserialize, Serialize};

use crate::baselines::{registry_ids, simfluence_fit_from, simfluence_rollout, simfluence_simulate_runs, SimfluenceParams};
use crate::dynamics::{split_runs, subsample_runs, ExampleId, RunSet};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, score_runs, EvalReport};
use crate::simulator::{fit, fit_with, rollout, simulate_runs, FitOptions, SimulatorConfig, SimulatorParams};
use crate::synthetic::{PlantedConfig, PlantedWorld};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub registered: usize,
    pub epochs: usize,
    pub featurized_loss_per_epoch: Vec<f64>,
    pub simfluence_loss_per_epoch: Vec<f64>,
    pub max_loss_gap: f64,
    pub max_val_gap: f64,
    /// Largest pointwise rollout difference over every train and validation trajectory.
    pub max_rollout_gap: f64,
    pub trajectories_compared: usize,
}

/// Fits the featurized simulator on one-hot embeddings (`p = 1`, `n = 1`,
/// test-side projections fixed at one) and the per-example simulator from
/// the matching initialization, then compares losses and rollouts.
pub fn reduce_check(train: &RunSet, val: &RunSet, config: &SimulatorConfig) -> Result<ReductionReport> {
    let registry = registry_ids(train, val);
    let mut ids: Vec<ExampleId> = registry.clone();
    let known: BTreeSet<&ExampleId> = registry.iter().collect();
    let tests: BTreeSet<ExampleId> = train.test_ids().into_iter().chain(val.test_ids()).collect();
    ids.extend(tests.into_iter().filter(|t| !known.contains(t)));
    let emb = EmbeddingTable::one_hot(&ids)?;

    let base = SimulatorConfig {
        order: 1,
        embed_dim: emb.dim(),
        proj_dim: 1,
        share_projections: false,
        ..config.clone()
    };
    let simf_init = SimfluenceParams::init(registry.iter().cloned(), base.seed)?;
    let mut init = SimulatorParams::zeros(base.clone())?;
    for id in &registry {
        let row = emb.index_of(id.as_str()).expect("registered id has an embedding");
        init.block_mut_w(0)[row] = simf_init.multiplicative(id.as_str())?;
        init.block_mut_w_add()[row] = simf_init.additive(id.as_str())?;
    }
    init.block_mut_u(0).fill(1.0);
    init.block_mut_u_add().fill(1.0);

    let (feat, feat_report) = fit_with(
        train,
        val,
        &emb,
        &base,
        FitOptions {
            init: Some(init),
            freeze_test_side: true,
        },
    )?;
    let (simf, simf_report) = simfluence_fit_from(train, val, &base, simf_init)?;

    let gap = |a: &[f64], b: &[f64]| {
        if a.len() != b.len() {
            return f64::INFINITY;
        }
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    let max_loss_gap = gap(&feat_report.train_loss_per_epoch, &simf_report.train_loss_per_epoch);
    let max_val_gap = gap(
        &feat_report.val_all_steps_mse_per_epoch,
        &simf_report.val_all_steps_mse_per_epoch,
    );

    let mut max_rollout_gap = 0.0f64;
    let mut compared = 0;
    for run in train.iter().chain(val.iter()) {
        for tr in run.trajectories_for(&base.metric) {
            let a = rollout(&feat, run, &emb, tr.test_id.as_str())?;
            let b = simfluence_rollout(&simf, run, tr.test_id.as_str(), &base.metric)?;
            max_rollout_gap = max_rollout_gap.max(gap(&a.values, &b.values));
            compared += 1;
        }
    }
    info!("reduction: loss gap {max_loss_gap:.3e}, rollout gap {max_rollout_gap:.3e}");
    Ok(ReductionReport {
        registered: registry.len(),
        epochs: feat_report.epochs_run,
        featurized_loss_per_epoch: feat_report.train_loss_per_epoch,
        simfluence_loss_per_epoch: simf_report.train_loss_per_epoch,
        max_loss_gap,
        max_val_gap,
        max_rollout_gap,
        trajectories_compared: compared,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Interval,
    Order,
}

impl Sweep {
    pub fn as_str(&self) -> &'static str {
        match self {
            Sweep::Interval => "interval",
            Sweep::Order => "order",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sweep: Sweep,
    pub value: usize,
    /// Leading steps excluded from scoring.
    pub skipped_steps: usize,
    pub steps: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub report: EvalReport,
}

/// Held-out run splits with their embeddings.
pub struct Splits<'a> {
    pub train: &'a RunSet,
    pub val: &'a RunSet,
    pub test: &'a RunSet,
    pub emb: &'a EmbeddingTable,
}

fn fit_and_score(s: &Splits<'_>, config: &SimulatorConfig, skip: usize) -> Result<(EvalReport, usize, usize)> {
    let (params, report) = fit(s.train, s.val, s.emb, config)?;
    let pred = simulate_runs(&params, s.test, s.emb)?;
    let scores = score_runs(&pred, s.test, &config.metric, skip)?;
    Ok((aggregate(&scores)?, report.best_epoch, report.epochs_run))
}

/// Refits on every split subsampled to each checkpoint interval and scores
/// held-out rollouts against the recorded values at the kept steps.
pub fn interval_ablation(s: &Splits<'_>, config: &SimulatorConfig, intervals: &[usize]) -> Result<Vec<AblationRow>> {
    if intervals.is_empty() {
        return Err(Error::InvalidArgument("no intervals to sweep".into()));
    }
    intervals
        .iter()
        .map(|&k| {
            let train = subsample_runs(s.train, k)?;
            let val = subsample_runs(s.val, k)?;
            let test = subsample_runs(s.test, k)?;
            let sub = Splits {
                train: &train,
                val: &val,
                test: &test,
                emb: s.emb,
            };
            let (report, best_epoch, epochs_run) = fit_and_score(&sub, config, config.order)?;
            info!("interval {k}: all-steps MSE {:.4e}", report.mse);
            Ok(AblationRow {
                sweep: Sweep::Interval,
                value: k,
                skipped_steps: config.order,
                steps: test.runs()[0].steps(),
                best_epoch,
                epochs_run,
                report,
            })
        })
        .collect()
}

/// Refits at each Markov order. Every order is scored on the same window,
/// the steps after the largest order in the sweep.
pub fn order_ablation(s: &Splits<'_>, config: &SimulatorConfig, orders: &[usize]) -> Result<Vec<AblationRow>> {
    let skip = *orders
        .iter()
        .max()
        .ok_or_else(|| Error::InvalidArgument("no orders to sweep".into()))?;
    orders
        .iter()
        .map(|&n| {
            let cfg = SimulatorConfig {
                order: n,
                ..config.clone()
            };
            let (report, best_epoch, epochs_run) = fit_and_score(s, &cfg, skip)?;
            info!("order {n}: all-steps MSE {:.4e}", report.mse);
            Ok(AblationRow {
                sweep: Sweep::Order,
                value: n,
                skipped_steps: skip,
                steps: s.test.runs()[0].steps(),
                best_epoch,
                epochs_run,
                report,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_ablation_csv(rows: &[AblationRow], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let fail = |e: csv::Error| Error::io("<csv>", e.into());
    w.write_record([
        "sweep",
        "value",
        "mse",
        "mse_std",
        "mae",
        "mae_std",
        "spearman",
        "spearman_std",
        "n_pairs",
        "steps",
        "skipped_steps",
        "best_epoch",
        "epochs_run",
    ])
    .map_err(fail)?;
    for r in rows {
        w.write_record([
            r.sweep.as_str().to_string(),
            r.value.to_string(),
            r.report.mse.to_string(),
            r.report.mse_std.to_string(),
            r.report.mae.to_string(),
            r.report.mae_std.to_string(),
            opt(r.report.spearman),
            opt(r.report.spearman_std),
            r.report.n_pairs.to_string(),
            r.steps.to_string(),
            r.skipped_steps.to_string(),
            r.best_epoch.to_string(),
            r.epochs_run.to_string(),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnseenReport {
    pub unseen_ids: usize,
    /// Held-out runs drawn from the full pool that contain a withheld id.
    pub runs_with_unseen: usize,
    pub seen_only_mse: f64,
    pub with_unseen_mse: f64,
    pub ratio: f64,
    /// Error the per-example simulator raised on the runs with withheld ids.
    pub simfluence_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnseenSetup {
    pub planted: PlantedConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub fit: SimulatorConfig,
}

/// Trains both simulators on runs over the seen pool, then scores the
/// featurized one on fresh seen-only runs and on runs drawn from the whole
/// pool, and rolls the per-example one out on the latter.
pub fn unseen_scenario(setup: &UnseenSetup, seed: u64) -> Result<UnseenReport> {
    let world = PlantedWorld::new(setup.planted.clone(), seed)?;
    if world.unseen.is_empty() {
        return Err(Error::InvalidArgument("unseen_fraction leaves no withheld ids".into()));
    }
    let fitted = world.runs(setup.n_train + setup.n_val)?;
    let (train, val, _) = split_runs(&fitted, setup.n_train, setup.n_val, 0, seed)?;
    let first = setup.n_train + setup.n_val;
    let seen_test = world.runs_from(&world.seen, first, setup.n_test)?;
    let unseen: BTreeSet<&ExampleId> = world.unseen.iter().collect();
    let mixed = world.runs_from(&world.train_ids, first + setup.n_test, setup.n_test)?;
    let mixed = RunSet::new(
        mixed
            .into_runs()
            .into_iter()
            .filter(|r| r.curriculum.iter().flatten().any(|id| unseen.contains(id)))
            .collect(),
    )?;
    if mixed.is_empty() {
        return Err(Error::validation("no held-out run contains a withheld id"));
    }

    let cfg = &setup.fit;
    let (params, _) = fit(&train, &val, &world.embeddings, cfg)?;
    let score = |runs: &RunSet| -> Result<f64> {
        let pred = simulate_runs(&params, runs, &world.embeddings)?;
        Ok(aggregate(&score_runs(&pred, runs, &cfg.metric, cfg.order)?)?.mse)
    };
    let seen_only_mse = score(&seen_test)?;
    let with_unseen_mse = score(&mixed)?;

    let simf_cfg = SimulatorConfig { order: 1, ..cfg.clone() };
    let (simf, _) = crate::baselines::simfluence_fit(&train, &val, &simf_cfg)?;
    let simfluence_error = simfluence_simulate_runs(&simf, &mixed, &cfg.metric)
        .err()
        .map(|e| e.to_string());

    Ok(UnseenReport {
        unseen_ids: world.unseen.len(),
        runs_with_unseen: mixed.len(),
        seen_only_mse,
        with_unseen_mse,
        ratio: with_unseen_mse / seen_only_mse,
        simfluence_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::generate_planted_runs;

    fn small() -> (RunSet, EmbeddingTable) {
        let cfg = PlantedConfig {
            pool_size: 40,
            per_run: 24,
            test_pool: 3,
            steps: 40,
            ..Default::default()
        };
        let (runs, emb, _) = generate_planted_runs(&cfg, 10, 5).unwrap();
        (runs, emb)
    }

    fn quick(cfg: &PlantedConfig) -> SimulatorConfig {
        SimulatorConfig {
            learning_rate: 1e-2,
            max_epochs: 5,
            warmup_steps: 5,
            batch_size: 64,
            ..cfg.simulator_config()
        }
    }

    #[test]
    fn one_hot_reduction_matches_per_example_fit() {
        let (runs, _) = small();
        let (train, val, _) = split_runs(&runs, 6, 2, 0, 1).unwrap();
        let cfg = SimulatorConfig {
            learning_rate: 1e-2,
            max_epochs: 8,
            warmup_steps: 4,
            batch_size: 32,
            ..Default::default()
        };
        let r = reduce_check(&train, &val, &cfg).unwrap();
        assert_eq!(r.featurized_loss_per_epoch.len(), 8);
        assert!(r.max_loss_gap < 1e-9, "{}", r.max_loss_gap);
        assert!(r.max_val_gap < 1e-9);
        assert!(r.max_rollout_gap < 1e-9);
        assert_eq!(r.trajectories_compared, 8 * 3);
    }

    #[test]
    fn sweeps_emit_one_row_per_setting() {
        let (runs, emb) = small();
        let (train, val, test) = split_runs(&runs, 6, 2, 2, 1).unwrap();
        let s = Splits {
            train: &train,
            val: &val,
            test: &test,
            emb: &emb,
        };
        let cfg = quick(&PlantedConfig::default());
        let rows = interval_ablation(&s, &cfg, &[1, 2, 5]).unwrap();
        assert_eq!(rows.iter().map(|r| r.value).collect::<Vec<_>>(), [1, 2, 5]);
        assert_eq!(rows.iter().map(|r| r.steps).collect::<Vec<_>>(), [40, 20, 8]);
        let orders = order_ablation(&s, &cfg, &[1, 3]).unwrap();
        assert!(orders.iter().all(|r| r.skipped_steps == 3));

        let mut buf = Vec::new();
        write_ablation_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(2).unwrap().starts_with("interval,2,"));
    }

    #[test]
    fn empty_sweeps_are_rejected() {
        let (runs, emb) = small();
        let (train, val, test) = split_runs(&runs, 6, 2, 2, 1).unwrap();
        let s = Splits {
            train: &train,
            val: &val,
            test: &test,
            emb: &emb,
        };
        let cfg = quick(&PlantedConfig::default());
        assert!(interval_ablation(&s, &cfg, &[]).is_err());
        assert!(order_ablation(&s, &cfg, &[]).is_err());
        assert!(interval_ablation(&s, &cfg, &[0]).is_err());
    }

    #[test]
    fn unseen_runs_break_the_per_example_simulator() {
        let planted = PlantedConfig {
            pool_size: 50,
            per_run: 30,
            test_pool: 3,
            steps: 30,
            unseen_fraction: 0.2,
            ..Default::default()
        };
        let setup = UnseenSetup {
            fit: quick(&planted),
            planted,
            n_train: 6,
            n_val: 2,
            n_test: 4,
        };
        let r = unseen_scenario(&setup, 3).unwrap();
        assert_eq!(r.unseen_ids, 10);
        assert!(r.runs_with_unseen > 0);
        assert!(r.seen_only_mse.is_finite() && r.with_unseen_mse.is_finite());
        assert!(r.simfluence_error.unwrap().contains("UnknownExample"));
    }
}
