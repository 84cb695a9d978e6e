//! Reference methods sharing the run data model: the per-example linear
//! simulator, TracIn-CP and Grad-Dot.

pub mod dump;
pub mod simfluence;
pub mod tracin;

pub use dump::{load_dump, read_dump, save_dump, write_dump, Checkpoint, GradientDump};
pub use simfluence::{
    registry_ids, simfluence_fit, simfluence_fit_from, simfluence_rollout, simfluence_simulate_runs, SimfluenceParams,
};
pub use tracin::{graddot_influence, tracin_influence, tracin_simulate, tracin_simulate_runs};
