//! Ground-truth generators: a planted generator that draws trajectories
//! from known bilinear factors, and a genuinely trained softmax classifier
//! with exact gradients and checkpoint dumps.

pub mod planted;
pub mod toy;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dynamics::ExampleId;

pub use planted::{generate_planted_runs, PlantedConfig, PlantedWorld};
pub use toy::{
    corrupt_labels, generate_toy_runs, make_toy_dataset, toy_runs_on, train_toy_run, ToyConfig, ToyDataset, ToyExample, ToyModel,
    ToyOutput, ToyRunRecord,
};

/// Samples `per_run` distinct examples from `pool`, then cuts a stream of
/// independently reshuffled passes over that subset into `steps` batches.
pub(crate) fn sample_curriculum(
    pool: &[ExampleId],
    per_run: usize,
    steps: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<ExampleId>> {
    let subset: Vec<ExampleId> = pool.choose_multiple(rng, per_run).cloned().collect();
    let need = steps * batch_size;
    let mut stream = Vec::with_capacity(need + subset.len());
    while stream.len() < need {
        let mut pass = subset.clone();
        pass.shuffle(rng);
        stream.extend(pass);
    }
    stream.truncate(need);
    stream.chunks(batch_size).map(<[ExampleId]>::to_vec).collect()
}

pub(crate) fn numbered_ids(prefix: &str, count: usize) -> Vec<ExampleId> {
    let width = count.saturating_sub(1).to_string().len().max(3);
    (0..count)
        .map(|i| ExampleId::new(format!("{prefix}-{i:0width$}")).expect("non-empty id"))
        .collect()
}

pub(crate) fn run_name(index: usize) -> String {
    format!("run-{index:03}")
}
