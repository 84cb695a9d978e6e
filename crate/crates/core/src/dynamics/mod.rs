//! Training-dynamics data model: curricula, metric trajectories and runs.
//!
//! A [`Run`] pairs an ordered curriculum of training batches with per-test
//! example metric trajectories. Step indices are 1-based and the value at
//! step `t` is the metric measured *after* the model consumed batch `t`.

pub(crate) mod io;
mod ops;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub use io::{load_runs, load_runs_with, read_runs, save_runs, write_runs, LoadOptions};
pub use ops::{split_runs, subsample_run, subsample_runs};

/// Opaque identifier of a training or test example.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct ExampleId(String);

impl ExampleId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::validation("example id must be non-empty"));
        }
        Ok(ExampleId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ExampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for ExampleId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ExampleId::new(s).map_err(serde::de::Error::custom)
    }
}

impl std::borrow::Borrow<str> for ExampleId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

/// Whether an example is consumed by training or only evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Train,
    Test,
}

/// The test metric a trajectory tracks.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricKind {
    Loss,
    Bleu,
    RougeL,
    Custom(String),
}

impl MetricKind {
    pub fn as_str(&self) -> &str {
        match self {
            MetricKind::Loss => "loss",
            MetricKind::Bleu => "bleu",
            MetricKind::RougeL => "rouge_l",
            MetricKind::Custom(name) => name,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "loss" => MetricKind::Loss,
            "bleu" => MetricKind::Bleu,
            "rouge_l" => MetricKind::RougeL,
            "" => return Err(Error::validation("metric name must be non-empty")),
            other => MetricKind::Custom(other.to_string()),
        })
    }

    /// Whether `v` lies in the metric's legal range.
    pub fn admits(&self, v: f64) -> bool {
        if !v.is_finite() {
            return false;
        }
        match self {
            MetricKind::Loss => v >= 0.0,
            MetricKind::Bleu => (0.0..=100.0).contains(&v),
            MetricKind::RougeL => (0.0..=1.0).contains(&v),
            MetricKind::Custom(_) => true,
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MetricKind::parse(s)
    }
}

impl Serialize for MetricKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for MetricKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        MetricKind::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Per-step metric values of one test example. `values[t - 1]` is step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub test_id: ExampleId,
    pub metric: MetricKind,
    pub values: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn final_value(&self) -> Option<f64> {
        self.values.last().copied()
    }
}

/// One training run: the curriculum consumed and the trajectories recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct Run {
    pub run_id: String,
    pub tags: BTreeMap<String, String>,
    pub curriculum: Vec<Vec<ExampleId>>,
    pub trajectories: Vec<Trajectory>,
}

impl Run {
    /// Builds a run and checks every invariant, including metric ranges.
    pub fn new(
        run_id: impl Into<String>,
        tags: BTreeMap<String, String>,
        curriculum: Vec<Vec<ExampleId>>,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self> {
        let run = Run {
            run_id: run_id.into(),
            tags,
            curriculum,
            trajectories,
        };
        run.validate(true)?;
        Ok(run)
    }

    /// Curriculum length `T`.
    pub fn steps(&self) -> usize {
        self.curriculum.len()
    }

    pub fn trajectory(&self, test_id: &str, metric: &MetricKind) -> Option<&Trajectory> {
        self.trajectories
            .iter()
            .find(|tr| tr.test_id.as_str() == test_id && &tr.metric == metric)
    }

    pub fn trajectories_for<'a>(&'a self, metric: &MetricKind) -> impl Iterator<Item = &'a Trajectory> + 'a {
        let metric = metric.clone();
        self.trajectories.iter().filter(move |tr| tr.metric == metric)
    }

    pub fn train_ids(&self) -> BTreeSet<&ExampleId> {
        self.curriculum.iter().flatten().collect()
    }

    pub fn test_ids(&self) -> BTreeSet<&ExampleId> {
        self.trajectories.iter().map(|tr| &tr.test_id).collect()
    }

    /// Checks the structural invariants. With `check_ranges` each value must
    /// also lie in its metric's legal range; predictions skip that check.
    pub fn validate(&self, check_ranges: bool) -> Result<()> {
        let fail = |msg: String| Err(Error::validation(format!("run '{}': {msg}", self.run_id)));
        if self.run_id.is_empty() {
            return Err(Error::validation("run_id must be non-empty"));
        }
        if self.curriculum.is_empty() {
            return fail("curriculum must have at least one step".into());
        }
        if let Some(t) = self.curriculum.iter().position(|b| b.is_empty()) {
            return fail(format!("empty batch at step {}", t + 1));
        }
        if self.trajectories.is_empty() {
            return fail("at least one trajectory is required".into());
        }
        let train = self.train_ids();
        let mut seen = BTreeSet::new();
        for tr in &self.trajectories {
            if tr.values.len() != self.steps() {
                return fail(format!(
                    "length mismatch: trajectory ({}, {}) has {} values but curriculum has {} steps",
                    tr.test_id,
                    tr.metric,
                    tr.values.len(),
                    self.steps()
                ));
            }
            if !seen.insert((&tr.test_id, &tr.metric)) {
                return fail(format!("duplicate trajectory ({}, {})", tr.test_id, tr.metric));
            }
            if train.contains(&tr.test_id) {
                return fail(format!(
                    "example '{}' appears both as a training and a test example",
                    tr.test_id
                ));
            }
            for (t, &v) in tr.values.iter().enumerate() {
                if !v.is_finite() {
                    return fail(format!(
                        "non-finite value in ({}, {}) at step {}",
                        tr.test_id,
                        tr.metric,
                        t + 1
                    ));
                }
                if check_ranges && !tr.metric.admits(v) {
                    return fail(format!(
                        "value {v} out of range for metric {} in trajectory of '{}' at step {}",
                        tr.metric,
                        tr.test_id,
                        t + 1
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A validated, immutable collection of runs, kept sorted by `run_id`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunSet {
    runs: Vec<Run>,
}

impl RunSet {
    /// Collects runs, rejecting duplicate ids and examples whose role differs
    /// between runs. Runs are assumed individually validated.
    pub fn new(mut runs: Vec<Run>) -> Result<Self> {
        runs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        if let Some(w) = runs.windows(2).find(|w| w[0].run_id == w[1].run_id) {
            return Err(Error::validation(format!("duplicate run_id '{}'", w[0].run_id)));
        }
        let mut train = BTreeSet::new();
        let mut test = BTreeSet::new();
        for run in &runs {
            train.extend(run.train_ids());
            test.extend(run.test_ids());
        }
        if let Some(id) = train.intersection(&test).next() {
            return Err(Error::validation(format!(
                "example '{id}' is used as a training example in one run and a test example in another"
            )));
        }
        Ok(RunSet { runs })
    }

    pub fn empty() -> Self {
        RunSet::default()
    }

    pub fn runs(&self) -> &[Run] {
        &self.runs
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn get(&self, run_id: &str) -> Option<&Run> {
        self.runs
            .binary_search_by(|r| r.run_id.as_str().cmp(run_id))
            .ok()
            .map(|i| &self.runs[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Run> {
        self.runs.iter()
    }

    /// Every distinct training example id, sorted.
    pub fn train_ids(&self) -> BTreeSet<ExampleId> {
        self.runs
            .iter()
            .flat_map(|r| r.curriculum.iter().flatten().cloned())
            .collect()
    }

    pub fn test_ids(&self) -> BTreeSet<ExampleId> {
        self.runs
            .iter()
            .flat_map(|r| r.trajectories.iter().map(|t| t.test_id.clone()))
            .collect()
    }

    pub fn into_runs(self) -> Vec<Run> {
        self.runs
    }
}

impl<'a> IntoIterator for &'a RunSet {
    type Item = &'a Run;
    type IntoIter = std::slice::Iter<'a, Run>;
    fn into_iter(self) -> Self::IntoIter {
        self.runs.iter()
    }
}

#[cfg(test)]
pub(crate) fn id(s: &str) -> ExampleId {
    ExampleId::new(s).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(test: &str, metric: MetricKind, values: Vec<f64>) -> Trajectory {
        Trajectory {
            test_id: id(test),
            metric,
            values,
        }
    }

    #[test]
    fn metric_names_round_trip() {
        for m in [
            MetricKind::Loss,
            MetricKind::Bleu,
            MetricKind::RougeL,
            MetricKind::Custom("acc".into()),
        ] {
            assert_eq!(MetricKind::parse(m.as_str()).unwrap(), m);
        }
        assert!(MetricKind::parse("").is_err());
    }

    #[test]
    fn metric_ranges() {
        assert!(MetricKind::Loss.admits(0.0));
        assert!(!MetricKind::Loss.admits(-1e-9));
        assert!(MetricKind::Bleu.admits(100.0));
        assert!(!MetricKind::Bleu.admits(100.5));
        assert!(MetricKind::RougeL.admits(1.0));
        assert!(!MetricKind::RougeL.admits(1.5));
        assert!(!MetricKind::Custom("x".into()).admits(f64::NAN));
    }

    #[test]
    fn minimal_run_is_valid() {
        let run = Run::new(
            "r",
            BTreeMap::new(),
            vec![vec![id("a")]],
            vec![traj("t", MetricKind::Loss, vec![1.0])],
        )
        .unwrap();
        assert_eq!(run.steps(), 1);
    }

    #[test]
    fn rejects_length_mismatch() {
        let err = Run::new(
            "r",
            BTreeMap::new(),
            vec![vec![id("a")]; 4],
            vec![traj("t", MetricKind::Loss, vec![1.0; 5])],
        )
        .unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
    }

    #[test]
    fn rejects_empty_batch_and_missing_trajectory() {
        let err = Run::new(
            "r",
            BTreeMap::new(),
            vec![vec![]],
            vec![traj("t", MetricKind::Loss, vec![1.0])],
        )
        .unwrap_err();
        assert!(err.to_string().contains("empty batch"));
        let err = Run::new("r", BTreeMap::new(), vec![vec![id("a")]], vec![]).unwrap_err();
        assert!(err.to_string().contains("at least one trajectory"));
    }

    #[test]
    fn rejects_out_of_range_metric() {
        let err = Run::new(
            "r",
            BTreeMap::new(),
            vec![vec![id("a")]],
            vec![traj("t", MetricKind::RougeL, vec![1.2])],
        )
        .unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn rejects_role_conflicts() {
        let err = Run::new(
            "r",
            BTreeMap::new(),
            vec![vec![id("a")]],
            vec![traj("a", MetricKind::Loss, vec![1.0])],
        )
        .unwrap_err();
        assert!(err.to_string().contains("both as a training and a test"));

        let r1 = Run::new(
            "r1",
            BTreeMap::new(),
            vec![vec![id("a")]],
            vec![traj("t", MetricKind::Loss, vec![1.0])],
        )
        .unwrap();
        let r2 = Run::new(
            "r2",
            BTreeMap::new(),
            vec![vec![id("t")]],
            vec![traj("u", MetricKind::Loss, vec![1.0])],
        )
        .unwrap();
        assert!(RunSet::new(vec![r1, r2]).is_err());
    }

    #[test]
    fn runset_sorts_and_rejects_duplicates() {
        let mk = |name: &str| {
            Run::new(
                name,
                BTreeMap::new(),
                vec![vec![id("a")]],
                vec![traj("t", MetricKind::Loss, vec![1.0])],
            )
            .unwrap()
        };
        let set = RunSet::new(vec![mk("b"), mk("a")]).unwrap();
        assert_eq!(set.runs()[0].run_id, "a");
        assert!(set.get("b").is_some());
        let err = RunSet::new(vec![mk("a"), mk("a")]).unwrap_err();
        assert!(err.to_string().contains("duplicate run_id"));
    }
}
