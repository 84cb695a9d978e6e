use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExampleId, MetricKind, Run, RunSet, Trajectory};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunRecord {
    run_id: String,
    #[serde(default)]
    tags: BTreeMap<String, String>,
    steps: Vec<StepRecord>,
    trajectories: Vec<TrajectoryRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    step: u64,
    batch: Vec<ExampleId>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    test_id: ExampleId,
    metric: MetricKind,
    values: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    /// Enforce metric ranges (loss >= 0, bleu in [0, 100], rouge_l in [0, 1]).
    /// Prediction files are loaded with this off.
    pub check_ranges: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { check_ranges: true }
    }
}

fn record_to_run(rec: RunRecord, location: &str, opts: LoadOptions) -> Result<Run> {
    for (i, s) in rec.steps.iter().enumerate() {
        if s.step != i as u64 + 1 {
            return Err(Error::validation(format!(
                "{location}: run '{}': step indices must be 1-based and contiguous (found {} at position {})",
                rec.run_id,
                s.step,
                i + 1
            )));
        }
    }
    let run = Run {
        run_id: rec.run_id,
        tags: rec.tags,
        curriculum: rec.steps.into_iter().map(|s| s.batch).collect(),
        trajectories: rec
            .trajectories
            .into_iter()
            .map(|t| Trajectory {
                test_id: t.test_id,
                metric: t.metric,
                values: t.values,
            })
            .collect(),
    };
    run.validate(opts.check_ranges)
        .map_err(|e| Error::validation(format!("{location}: {e}")))?;
    Ok(run)
}

fn run_to_record(run: &Run) -> RunRecord {
    RunRecord {
        run_id: run.run_id.clone(),
        tags: run.tags.clone(),
        steps: run
            .curriculum
            .iter()
            .enumerate()
            .map(|(i, b)| StepRecord {
                step: i as u64 + 1,
                batch: b.clone(),
            })
            .collect(),
        trajectories: run
            .trajectories
            .iter()
            .map(|t| TrajectoryRecord {
                test_id: t.test_id.clone(),
                metric: t.metric.clone(),
                values: t.values.clone(),
            })
            .collect(),
    }
}

/// Parses JSONL runs from a reader; `source` names the input in errors.
pub fn read_runs(reader: impl BufRead, source: &str, opts: LoadOptions) -> Result<Vec<Run>> {
    let mut runs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{source}:{}", i + 1);
        let rec: RunRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            location: location.clone(),
            message: e.to_string(),
        })?;
        runs.push(record_to_run(rec, &location, opts)?);
    }
    Ok(runs)
}

pub fn write_runs<'a>(runs: impl IntoIterator<Item = &'a Run>, mut w: impl Write) -> std::io::Result<()> {
    for run in runs {
        serde_json::to_writer(&mut w, &run_to_record(run))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn jsonl_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "jsonl") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn read_file(path: &Path, opts: LoadOptions) -> Result<Vec<Run>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_runs(BufReader::new(file), &path.display().to_string(), opts)
}

/// Loads a run file or every `*.jsonl` file in a directory.
pub fn load_runs(path: impl AsRef<Path>) -> Result<RunSet> {
    load_runs_with(path, LoadOptions::default())
}

pub fn load_runs_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<RunSet> {
    let path = path.as_ref();
    let files = if path.is_dir() {
        jsonl_files(path)?
    } else {
        vec![path.to_path_buf()]
    };
    let parsed: Vec<Vec<Run>> = files
        .par_iter()
        .map(|f| read_file(f, opts))
        .collect::<Result<_>>()?;
    RunSet::new(parsed.into_iter().flatten().collect())
}

pub(crate) fn file_stem_for(run_id: &str) -> String {
    run_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes one `<run_id>.jsonl` file per run into `dir` (created if absent).
pub fn save_runs(runs: &RunSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = BTreeSet::new();
    for run in runs {
        let stem = file_stem_for(&run.run_id);
        if !stems.insert(stem.clone()) {
            return Err(Error::validation(format!(
                "run ids collide on file name '{stem}.jsonl'"
            )));
        }
        let path = dir.join(format!("{stem}.jsonl"));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        write_runs(std::iter::once(run), &mut w).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str =
        r#"{"run_id":"r0","steps":[{"step":1,"batch":["a"]}],"trajectories":[{"test_id":"t","metric":"loss","values":[0.5]}]}"#;

    #[test]
    fn parses_minimal_run() {
        let runs = read_runs(MINIMAL.as_bytes(), "mem", LoadOptions::default()).unwrap();
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].steps(), 1);
        assert_eq!(runs[0].trajectories[0].values, vec![0.5]);
    }

    #[test]
    fn length_mismatch_is_reported_with_location() {
        let line = r#"{"run_id":"r0","steps":[{"step":1,"batch":["a"]},{"step":2,"batch":["a"]},{"step":3,"batch":["a"]},{"step":4,"batch":["a"]}],"trajectories":[{"test_id":"t","metric":"loss","values":[1,1,1,1,1]}]}"#;
        let err = read_runs(line.as_bytes(), "mem", LoadOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("length mismatch") && msg.contains("mem:1") && msg.contains("r0"), "{msg}");
    }

    #[test]
    fn malformed_json_and_wrong_types() {
        let err = read_runs("{not json".as_bytes(), "mem", LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        let bad = r#"{"run_id":"r0","steps":[{"step":"one","batch":["a"]}],"trajectories":[]}"#;
        let err = read_runs(bad.as_bytes(), "mem", LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn non_contiguous_steps_rejected() {
        let line = r#"{"run_id":"r0","steps":[{"step":2,"batch":["a"]}],"trajectories":[{"test_id":"t","metric":"loss","values":[1]}]}"#;
        let err = read_runs(line.as_bytes(), "mem", LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("contiguous"));
    }

    #[test]
    fn range_check_can_be_disabled_for_predictions() {
        let line = r#"{"run_id":"r0","steps":[{"step":1,"batch":["a"]}],"trajectories":[{"test_id":"t","metric":"loss","values":[-0.5]}]}"#;
        assert!(read_runs(line.as_bytes(), "mem", LoadOptions::default()).is_err());
        assert!(read_runs(line.as_bytes(), "mem", LoadOptions { check_ranges: false }).is_ok());
    }

    #[test]
    fn duplicate_run_ids_across_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.jsonl"), MINIMAL).unwrap();
        fs::write(dir.path().join("b.jsonl"), MINIMAL).unwrap();
        let err = load_runs(dir.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate run_id"));
    }

    #[test]
    fn serialization_is_canonical() {
        let runs = read_runs(MINIMAL.as_bytes(), "mem", LoadOptions::default()).unwrap();
        let mut out = Vec::new();
        write_runs(&runs, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text.trim_end(),
            r#"{"run_id":"r0","tags":{},"steps":[{"step":1,"batch":["a"]}],"trajectories":[{"test_id":"t","metric":"loss","values":[0.5]}]}"#
        );
    }
}
