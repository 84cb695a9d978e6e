//! Per-checkpoint gradient dot products, one JSON object per line:
//! `{"step":s,"lr":eta,"dots":[{"train":..,"test":..,"v":..}, ...]}`.
//!
//! A checkpoint at step `s` holds the parameters in effect when batch `s`
//! is consumed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::ExampleId;
use crate::error::{Error, Result};

pub type PairKey = (ExampleId, ExampleId);

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// 1-based training step.
    pub step: usize,
    pub lr: f64,
    /// `(train_id, test_id) -> <grad L(train), grad L(test)>`.
    pub dots: BTreeMap<PairKey, f64>,
}

impl Checkpoint {
    pub fn dot(&self, train_id: &str, test_id: &str) -> Option<f64> {
        let key = (ExampleId::new(train_id).ok()?, ExampleId::new(test_id).ok()?);
        self.dots.get(&key).copied()
    }

    fn require(&self, train_id: &str, test_id: &str) -> Result<f64> {
        self.dot(train_id, test_id).ok_or_else(|| {
            Error::validation(format!(
                "gradient dump checkpoint at step {} has no dot for pair ({train_id}, {test_id})",
                self.step
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientDump {
    checkpoints: Vec<Checkpoint>,
}

impl GradientDump {
    /// Checkpoint steps must be strictly increasing, learning rates finite
    /// and non-negative, dot products finite.
    pub fn new(checkpoints: Vec<Checkpoint>) -> Result<Self> {
        if checkpoints.is_empty() {
            return Err(Error::validation("gradient dump has no checkpoints"));
        }
        for (k, cp) in checkpoints.iter().enumerate() {
            if cp.step == 0 {
                return Err(Error::validation("checkpoint steps are 1-based"));
            }
            if k > 0 && cp.step <= checkpoints[k - 1].step {
                return Err(Error::validation(format!(
                    "checkpoint steps must be strictly increasing ({} after {})",
                    cp.step,
                    checkpoints[k - 1].step
                )));
            }
            if !cp.lr.is_finite() || cp.lr < 0.0 {
                return Err(Error::validation(format!(
                    "checkpoint at step {} has invalid learning rate {}",
                    cp.step, cp.lr
                )));
            }
            if let Some(((a, b), v)) = cp.dots.iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "checkpoint at step {} has non-finite dot {v} for ({a}, {b})",
                    cp.step
                )));
            }
        }
        Ok(GradientDump { checkpoints })
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    /// Latest checkpoint with `step <= step`, or the first checkpoint when
    /// every checkpoint lies after `step`.
    pub fn checkpoint_for(&self, step: usize) -> &Checkpoint {
        let k = self.checkpoints.partition_point(|cp| cp.step <= step);
        &self.checkpoints[k.saturating_sub(1)]
    }

    /// Dump holding only the last checkpoint.
    pub fn final_checkpoint(&self) -> GradientDump {
        GradientDump {
            checkpoints: vec![self.checkpoints.last().expect("dump is non-empty").clone()],
        }
    }
}

pub(crate) fn require_dot(cp: &Checkpoint, train_id: &str, test_id: &str) -> Result<f64> {
    cp.require(train_id, test_id)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DotRecord {
    train: ExampleId,
    test: ExampleId,
    v: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointRecord {
    step: usize,
    lr: f64,
    dots: Vec<DotRecord>,
}

pub fn read_dump(reader: impl Read, source: &str) -> Result<GradientDump> {
    let mut checkpoints = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{source}:{}", i + 1);
        let rec: CheckpointRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            location: location.clone(),
            message: e.to_string(),
        })?;
        let mut dots = BTreeMap::new();
        for d in rec.dots {
            if dots.insert((d.train.clone(), d.test.clone()), d.v).is_some() {
                return Err(Error::Parse {
                    location,
                    message: format!("duplicate pair ({}, {})", d.train, d.test),
                });
            }
        }
        checkpoints.push(Checkpoint {
            step: rec.step,
            lr: rec.lr,
            dots,
        });
    }
    GradientDump::new(checkpoints)
}

pub fn write_dump(dump: &GradientDump, writer: impl Write) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for cp in &dump.checkpoints {
        let rec = CheckpointRecord {
            step: cp.step,
            lr: cp.lr,
            dots: cp
                .dots
                .iter()
                .map(|((a, b), v)| DotRecord {
                    train: a.clone(),
                    test: b.clone(),
                    v: *v,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::io("<gradient dump>", e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io("<gradient dump>", e))?;
    }
    w.flush().map_err(|e| Error::io("<gradient dump>", e))
}

pub fn load_dump(path: impl AsRef<Path>) -> Result<GradientDump> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dump(file, &path.display().to_string())
}

pub fn save_dump(dump: &GradientDump, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dump(dump, file).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

#[cfg(test)]
pub(crate) fn checkpoint(step: usize, lr: f64, dots: &[(&str, &str, f64)]) -> Checkpoint {
    use crate::dynamics::id;
    Checkpoint {
        step,
        lr,
        dots: dots.iter().map(|(a, b, v)| ((id(a), id(b)), *v)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(GradientDump::new(vec![]).is_err());
        assert!(GradientDump::new(vec![checkpoint(2, 0.1, &[]), checkpoint(2, 0.1, &[])]).is_err());
        assert!(GradientDump::new(vec![checkpoint(1, -0.1, &[])]).is_err());
        assert!(GradientDump::new(vec![checkpoint(1, 0.1, &[("a", "t", f64::NAN)])]).is_err());
        assert!(GradientDump::new(vec![checkpoint(0, 0.1, &[])]).is_err());
        assert!(GradientDump::new(vec![checkpoint(1, 0.0, &[]), checkpoint(5, 0.1, &[])]).is_ok());
    }

    #[test]
    fn checkpoint_selection_is_nearest_at_or_before() {
        let dump = GradientDump::new(vec![checkpoint(3, 0.1, &[]), checkpoint(7, 0.1, &[])]).unwrap();
        assert_eq!(dump.checkpoint_for(1).step, 3);
        assert_eq!(dump.checkpoint_for(3).step, 3);
        assert_eq!(dump.checkpoint_for(6).step, 3);
        assert_eq!(dump.checkpoint_for(7).step, 7);
        assert_eq!(dump.checkpoint_for(100).step, 7);
        assert_eq!(dump.final_checkpoint().checkpoints()[0].step, 7);
    }

    #[test]
    fn round_trip() {
        let dump = GradientDump::new(vec![
            checkpoint(1, 0.1, &[("a", "t", 3.0), ("b", "t", -0.25)]),
            checkpoint(4, 0.05, &[("a", "t", 1.0 / 3.0)]),
        ])
        .unwrap();
        let mut buf = Vec::new();
        write_dump(&dump, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(r#"{"step":1,"lr":0.1,"dots":[{"train":"a","test":"t","v":3.0}"#));
        assert_eq!(read_dump(&buf[..], "mem").unwrap(), dump);
    }

    #[test]
    fn parse_errors_carry_line() {
        let text = "{\"step\":1,\"lr\":0.1,\"dots\":[]}\n{\"step\":2,\"lr\":0.1}\n";
        let err = read_dump(text.as_bytes(), "d.jsonl").unwrap_err();
        assert!(err.to_string().contains("d.jsonl:2"), "{err}");
        let dup = "{\"step\":1,\"lr\":0.1,\"dots\":[{\"train\":\"a\",\"test\":\"t\",\"v\":1},{\"train\":\"a\",\"test\":\"t\",\"v\":2}]}\n";
        assert!(read_dump(dup.as_bytes(), "d").is_err());
    }
}
