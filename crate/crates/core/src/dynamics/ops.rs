use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ExampleId, Run, RunSet, Trajectory};
use crate::error::{Error, Result};

/// Seeded disjoint partition into (train, validation, test) run sets.
pub fn split_runs(
    runs: &RunSet,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<(RunSet, RunSet, RunSet)> {
    let requested = n_train + n_val + n_test;
    if requested > runs.len() {
        return Err(Error::InsufficientRuns {
            requested,
            available: runs.len(),
        });
    }
    let mut order: Vec<usize> = (0..runs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| {
        RunSet::new(idx.iter().map(|&i| runs.runs()[i].clone()).collect())
    };
    Ok((
        pick(&order[..n_train])?,
        pick(&order[n_train..n_train + n_val])?,
        pick(&order[n_train + n_val..requested])?,
    ))
}

/// Keeps steps `k, 2k, ...`; each kept step's batch is the deduplicated union
/// (first-occurrence order) of the `k` batches it stands for. Steps after the
/// last full window are dropped.
pub fn subsample_run(run: &Run, interval: usize) -> Result<Run> {
    if interval == 0 {
        return Err(Error::InvalidArgument("checkpoint interval must be >= 1".into()));
    }
    if interval > run.steps() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint interval {interval} exceeds run '{}' length {}",
            run.run_id,
            run.steps()
        )));
    }
    if interval == 1 {
        return Ok(run.clone());
    }
    let kept = run.steps() / interval;
    let curriculum = run
        .curriculum
        .chunks_exact(interval)
        .take(kept)
        .map(|window| {
            let mut merged: Vec<ExampleId> = Vec::new();
            for id in window.iter().flatten() {
                if !merged.contains(id) {
                    merged.push(id.clone());
                }
            }
            merged
        })
        .collect();
    let trajectories = run
        .trajectories
        .iter()
        .map(|tr| Trajectory {
            test_id: tr.test_id.clone(),
            metric: tr.metric.clone(),
            values: (1..=kept).map(|m| tr.values[m * interval - 1]).collect(),
        })
        .collect();
    let out = Run {
        run_id: run.run_id.clone(),
        tags: run.tags.clone(),
        curriculum,
        trajectories,
    };
    out.validate(false)?;
    Ok(out)
}

pub fn subsample_runs(runs: &RunSet, interval: usize) -> Result<RunSet> {
    RunSet::new(
        runs.iter()
            .map(|r| subsample_run(r, interval))
            .collect::<Result<_>>()?,
    )
}
