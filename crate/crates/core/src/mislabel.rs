//! Mislabeled-example detection by self-influence ranking.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{tracin_influence, GradientDump};
use crate::dynamics::ExampleId;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::simulator::{influence_factors, SimulatorParams};
use crate::synthetic::toy::{corrupt_labels, fit_toy_classifier, make_toy_dataset, restore_labels, train_toy_run, ToyConfig, ToyDataset};

/// Number of inspected fractions: `k / CURVE_POINTS` for `k = 1..=CURVE_POINTS`.
pub const CURVE_POINTS: usize = 20;

/// Lag-1 multiplicative factor of an example on itself.
pub fn self_influence_featurized(params: &SimulatorParams, emb: &EmbeddingTable, train_id: &str) -> Result<f64> {
    let h = emb.require(train_id)?;
    let (a, _) = influence_factors(params, h, h)?;
    Ok(a[0])
}

/// TracIn-CP influence of an example on itself.
pub fn self_influence_tracin(dump: &GradientDump, train_id: &str) -> Result<f64> {
    tracin_influence(dump, train_id, train_id)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub inspected: usize,
    /// Share of flipped examples among the top `inspected` by score.
    pub found: f64,
    /// Expected share under random inspection.
    pub random: f64,
}

fn inspected(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round() as usize
}

fn curve_for_order(order: &[&ExampleId], flipped: &BTreeSet<ExampleId>) -> Vec<CurvePoint> {
    let n = order.len();
    let mut hits_prefix = Vec::with_capacity(n + 1);
    hits_prefix.push(0usize);
    for id in order {
        hits_prefix.push(hits_prefix.last().unwrap() + usize::from(flipped.contains(*id)));
    }
    (1..=CURVE_POINTS)
        .map(|k| {
            let fraction = k as f64 / CURVE_POINTS as f64;
            let m = inspected(fraction, n);
            CurvePoint {
                fraction,
                inspected: m,
                found: hits_prefix[m] as f64 / flipped.len() as f64,
                random: fraction,
            }
        })
        .collect()
}

fn check_inputs(ids: &[&ExampleId], flipped: &BTreeSet<ExampleId>) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("no scores to rank".into()));
    }
    if flipped.is_empty() {
        return Err(Error::InvalidArgument("no flipped examples to detect".into()));
    }
    Ok(())
}

/// Inspects examples in descending score order (ties by ascending id) and
/// reports the share of flipped examples found at each inspected fraction.
pub fn detection_curve(scores: &BTreeMap<ExampleId, f64>, flipped: &BTreeSet<ExampleId>) -> Result<Vec<CurvePoint>> {
    let mut order: Vec<(&ExampleId, f64)> = scores.iter().map(|(k, v)| (k, *v)).collect();
    if let Some((id, v)) = order.iter().find(|(_, v)| v.is_nan()) {
        return Err(Error::Numerical(format!("score of '{id}' is {v}")));
    }
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let ids: Vec<&ExampleId> = order.into_iter().map(|(k, _)| k).collect();
    check_inputs(&ids, flipped)?;
    Ok(curve_for_order(&ids, flipped))
}

/// Detection curve of random inspection orders, averaged over `repeats`
/// seeded shuffles.
pub fn shuffled_baseline(
    ids: &BTreeSet<ExampleId>,
    flipped: &BTreeSet<ExampleId>,
    repeats: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    let mut order: Vec<&ExampleId> = ids.iter().collect();
    check_inputs(&order, flipped)?;
    if repeats == 0 {
        return Err(Error::InvalidArgument("need at least one shuffle".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; CURVE_POINTS];
    for _ in 0..repeats {
        order.shuffle(&mut rng);
        for (s, p) in sum.iter_mut().zip(curve_for_order(&order, flipped)) {
            *s += p.found;
        }
    }
    let mut curve = curve_for_order(&order, flipped);
    for (p, s) in curve.iter_mut().zip(sum) {
        p.found = s / repeats as f64;
    }
    Ok(curve)
}

pub fn write_curve_csv(curve: &[CurvePoint], baseline: Option<&[CurvePoint]>, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io_err = |e: csv::Error| Error::io("<csv>", e.into());
    let mut header = vec!["fraction", "inspected", "found", "random"];
    if baseline.is_some() {
        header.push("shuffled");
    }
    w.write_record(&header).map_err(io_err)?;
    for (k, p) in curve.iter().enumerate() {
        let mut row = vec![
            p.fraction.to_string(),
            p.inspected.to_string(),
            p.found.to_string(),
            p.random.to_string(),
        ];
        if let Some(b) = baseline {
            row.push(b[k].found.to_string());
        }
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Toy corruption trial: a single run over the whole training set with
/// self-pair dumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MislabelConfig {
    pub toy: ToyConfig,
    pub corruption: f64,
    pub epochs: usize,
}

impl Default for MislabelConfig {
    fn default() -> Self {
        MislabelConfig {
            toy: ToyConfig {
                classes: 2,
                test_pool: 200,
                checkpoint_interval: 10,
                self_pairs: true,
                ..Default::default()
            },
            corruption: 0.4,
            epochs: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MislabelTrial {
    pub clean: ToyDataset,
    pub corrupted: ToyDataset,
    pub flipped: BTreeSet<ExampleId>,
    pub scores: BTreeMap<ExampleId, f64>,
    pub curve: Vec<CurvePoint>,
    pub shuffled: Vec<CurvePoint>,
}

/// Corrupts a fresh toy dataset, trains once over it and ranks every
/// training example by TracIn self-influence.
pub fn mislabel_trial(cfg: &MislabelConfig, seed: u64) -> Result<MislabelTrial> {
    let clean = make_toy_dataset(&cfg.toy, seed)?;
    let (corrupted, flipped) = corrupt_labels(&clean, cfg.corruption, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let n = corrupted.train.len();
    let mut stream = Vec::with_capacity(n * cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut pass = corrupted.train_ids();
        pass.shuffle(&mut rng);
        stream.extend(pass);
    }
    let curriculum: Vec<Vec<ExampleId>> = stream.chunks(cfg.toy.batch_size).map(<[ExampleId]>::to_vec).collect();
    let toy = ToyConfig {
        self_pairs: true,
        checkpoint_interval: cfg.toy.checkpoint_interval.max(1),
        ..cfg.toy.clone()
    };
    let record = train_toy_run(&corrupted, "mislabel", &curriculum, &toy)?;
    let dump = record.dump.expect("checkpoint interval is positive");
    let scores = corrupted
        .train
        .iter()
        .map(|ex| Ok((ex.id.clone(), self_influence_tracin(&dump, ex.id.as_str())?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let curve = detection_curve(&scores, &flipped)?;
    let ids: BTreeSet<ExampleId> = scores.keys().cloned().collect();
    let shuffled = shuffled_baseline(&ids, &flipped, 10, seed)?;
    Ok(MislabelTrial {
        clean,
        corrupted,
        flipped,
        scores,
        curve,
        shuffled,
    })
}

/// Test accuracy after restoring the labels of the flipped examples found in
/// the top `fraction` of the ranking and retraining from scratch.
pub fn correction_accuracy(trial: &MislabelTrial, fractions: &[f64], epochs: usize, lr: f64, seed: u64) -> Result<Vec<(f64, f64)>> {
    let mut order: Vec<(&ExampleId, f64)> = trial.scores.iter().map(|(k, v)| (k, *v)).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    fractions
        .iter()
        .map(|&f| {
            let m = inspected(f, order.len());
            let fixed: BTreeSet<ExampleId> = order[..m]
                .iter()
                .filter(|(id, _)| trial.flipped.contains(*id))
                .map(|(id, _)| (*id).clone())
                .collect();
            let data = restore_labels(&trial.corrupted, &trial.clean, &fixed)?;
            let model = fit_toy_classifier(&data, epochs, 4, lr, seed)?;
            Ok((f, model.accuracy(&data.test)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::dump::checkpoint;
    use crate::dynamics::id;
    use crate::simulator::SimulatorConfig;

    fn ids(n: usize) -> Vec<ExampleId> {
        (0..n).map(|i| id(&format!("e{i:02}"))).collect()
    }

    #[test]
    fn tracin_self_influence() {
        let dump = GradientDump::new(vec![
            checkpoint(1, 0.1, &[("a", "a", 4.0), ("z", "z", 0.0)]),
            checkpoint(2, 0.1, &[("a", "a", 2.0), ("z", "z", 0.0)]),
        ])
        .unwrap();
        assert!((self_influence_tracin(&dump, "a").unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(self_influence_tracin(&dump, "z").unwrap(), 0.0);
        assert!(self_influence_tracin(&dump, "q").is_err());
    }

    #[test]
    fn featurized_self_influence() {
        let cfg = SimulatorConfig {
            embed_dim: 2,
            proj_dim: 1,
            ..Default::default()
        };
        let mut params = SimulatorParams::zeros(cfg).unwrap();
        params.block_mut_w(0).copy_from_slice(&[1.0, 0.0]);
        params.block_mut_u(0).copy_from_slice(&[0.0, 1.0]);
        let emb = EmbeddingTable::from_entries(2, [(id("x"), &[1.0, 0.0][..]), (id("y"), &[0.6, 0.8][..])]).unwrap();
        assert_eq!(self_influence_featurized(&params, &emb, "x").unwrap(), 0.0);
        assert!((self_influence_featurized(&params, &emb, "y").unwrap() - 0.48).abs() < 1e-15);
        assert!(matches!(
            self_influence_featurized(&params, &emb, "q"),
            Err(Error::MissingEmbedding(_))
        ));
        assert!(EmbeddingTable::from_entries(2, [(id("z"), &[0.0, 0.0][..])]).is_err());
    }

    #[test]
    fn perfect_and_inverted_rankings() {
        let all = ids(20);
        let flipped: BTreeSet<ExampleId> = all[..5].iter().cloned().collect();
        let perfect: BTreeMap<_, _> = all.iter().map(|i| (i.clone(), f64::from(u8::from(flipped.contains(i))))).collect();
        let curve = detection_curve(&perfect, &flipped).unwrap();
        assert_eq!(curve.len(), 20);
        assert_eq!(curve[4].fraction, 0.25);
        assert_eq!(curve[4].found, 1.0);
        assert_eq!(curve[1].found, 0.4);
        let inverted: BTreeMap<_, _> = perfect.iter().map(|(k, v)| (k.clone(), -v)).collect();
        let worst = detection_curve(&inverted, &flipped).unwrap();
        for p in &worst {
            if p.fraction <= 0.75 + 1e-12 {
                assert_eq!(p.found, 0.0);
            }
        }
        assert_eq!(worst.last().unwrap().found, 1.0);
        for (a, b) in curve.iter().zip(&worst) {
            assert!(a.found >= b.found);
            assert_eq!(a.random, a.fraction);
        }
    }

    #[test]
    fn ties_break_by_id() {
        let all = ids(4);
        let flipped: BTreeSet<ExampleId> = [all[0].clone()].into();
        let flat: BTreeMap<_, _> = all.iter().map(|i| (i.clone(), 1.0)).collect();
        let curve = detection_curve(&flat, &flipped).unwrap();
        assert_eq!(curve[4].inspected, 1);
        assert_eq!(curve[4].found, 1.0);
    }

    #[test]
    fn rank_only_dependence() {
        let all = ids(30);
        let flipped: BTreeSet<ExampleId> = all.iter().step_by(3).cloned().collect();
        let scores: BTreeMap<_, _> = all.iter().enumerate().map(|(k, i)| (i.clone(), ((k * 7) % 11) as f64 - 5.0)).collect();
        let warped: BTreeMap<_, _> = scores.iter().map(|(k, v)| (k.clone(), (v / 3.0).exp() + 2.0)).collect();
        assert_eq!(
            detection_curve(&scores, &flipped).unwrap(),
            detection_curve(&warped, &flipped).unwrap()
        );
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(detection_curve(&BTreeMap::new(), &[id("a")].into()).is_err());
        let one: BTreeMap<_, _> = [(id("a"), 1.0)].into();
        assert!(detection_curve(&one, &BTreeSet::new()).is_err());
    }

    #[test]
    fn shuffled_baseline_tracks_diagonal() {
        let all: BTreeSet<ExampleId> = ids(200).into_iter().collect();
        let flipped: BTreeSet<ExampleId> = all.iter().take(80).cloned().collect();
        let base = shuffled_baseline(&all, &flipped, 10, 3).unwrap();
        for p in &base {
            assert!((p.found - p.fraction).abs() < 0.1, "{p:?}");
        }
    }

    #[test]
    fn toy_self_influence_equals_gradient_norms() {
        let cfg = MislabelConfig {
            toy: ToyConfig {
                pool_size: 24,
                per_run: 24,
                classes: 2,
                checkpoint_interval: 3,
                self_pairs: true,
                ..Default::default()
            },
            epochs: 1,
            ..Default::default()
        };
        let data = make_toy_dataset(&cfg.toy, 2).unwrap();
        let curriculum: Vec<Vec<ExampleId>> = data.train_ids().chunks(4).map(<[ExampleId]>::to_vec).collect();
        let rec = train_toy_run(&data, "r", &curriculum, &cfg.toy).unwrap();
        let dump = rec.dump.unwrap();
        for ex in &data.train {
            let expected: f64 = rec
                .snapshots
                .iter()
                .filter(|(s, _)| *s <= curriculum.len())
                .map(|(_, m)| cfg.toy.learning_rate * m.gradient(ex).iter().map(|g| g * g).sum::<f64>())
                .sum();
            let got = self_influence_tracin(&dump, ex.id.as_str()).unwrap();
            assert!((got - expected).abs() < 1e-10);
        }
    }
}
