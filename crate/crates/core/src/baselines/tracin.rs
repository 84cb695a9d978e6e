//! TracIn-CP and Grad-Dot over a [`GradientDump`].

use super::dump::{require_dot, GradientDump};
use crate::dynamics::{MetricKind, Run, Trajectory};
use crate::error::{Error, Result};

/// `sum_k lr_k * dot_k(train_id, test_id)` over all checkpoints.
pub fn tracin_influence(dump: &GradientDump, train_id: &str, test_id: &str) -> Result<f64> {
    dump.checkpoints()
        .iter()
        .map(|cp| Ok(cp.lr * require_dot(cp, train_id, test_id)?))
        .sum()
}

/// Dot product at the single checkpoint of a final-model dump.
pub fn graddot_influence(dump: &GradientDump, train_id: &str, test_id: &str) -> Result<f64> {
    if dump.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad-dot needs a dump with exactly one checkpoint, got {}",
            dump.len()
        )));
    }
    require_dot(&dump.checkpoints()[0], train_id, test_id)
}

/// First-order loss simulation: the value at 1-based step `s > 1` is the
/// value at `s - 1` minus `lr * sum_{i in c_s} dot(i, test_id)`, with dots and
/// learning rate taken from the latest checkpoint at or before step `s`.
pub fn tracin_simulate(dump: &GradientDump, run: &Run, test_id: &str, y1: f64) -> Result<Trajectory> {
    let test = run
        .test_ids()
        .into_iter()
        .find(|t| t.as_str() == test_id)
        .cloned()
        .ok_or_else(|| Error::validation(format!("run '{}' has no test example '{test_id}'", run.run_id)))?;
    let mut values = Vec::with_capacity(run.steps());
    values.push(y1);
    for t in 1..run.steps() {
        let cp = dump.checkpoint_for(t + 1);
        let mut sum = 0.0;
        for i in &run.curriculum[t] {
            sum += require_dot(cp, i.as_str(), test_id)?;
        }
        values.push(values[t - 1] - cp.lr * sum);
    }
    Ok(Trajectory {
        test_id: test,
        metric: MetricKind::Loss,
        values,
    })
}

/// [`tracin_simulate`] for every loss trajectory of every run, seeded from
/// the recorded step-1 loss.
pub fn tracin_simulate_runs(dump: &GradientDump, runs: &crate::dynamics::RunSet) -> Result<crate::dynamics::RunSet> {
    use rayon::prelude::*;
    let predicted: Vec<Run> = runs
        .runs()
        .par_iter()
        .map(|run| {
            let trajectories = run
                .trajectories_for(&MetricKind::Loss)
                .map(|tr| tracin_simulate(dump, run, tr.test_id.as_str(), tr.values[0]))
                .collect::<Result<Vec<_>>>()?;
            if trajectories.is_empty() {
                return Err(Error::validation(format!(
                    "missing trajectory: run '{}' has no loss trajectory",
                    run.run_id
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
    crate::dynamics::RunSet::new(predicted)
}
