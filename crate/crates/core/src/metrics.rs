//! Evaluation protocol: all-steps MSE and MAE over the unseeded window,
//! final-step Spearman correlation, and mean(std) aggregation over
//! held-out runs.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::{ExampleId, MetricKind, RunSet, Trajectory};
use crate::error::{Error, Result};

fn window<'a>(pred: &'a Trajectory, truth: &'a Trajectory, order: usize) -> Result<(&'a [f64], &'a [f64])> {
    if pred.metric != truth.metric {
        return Err(Error::validation(format!(
            "metric mismatch: predicted '{}' vs true '{}'",
            pred.metric, truth.metric
        )));
    }
    if pred.values.len() != truth.values.len() {
        return Err(Error::validation(format!(
            "length mismatch: predicted trajectory has {} steps, true has {}",
            pred.values.len(),
            truth.values.len()
        )));
    }
    if truth.values.len() <= order {
        return Err(Error::validation(format!(
            "empty evaluation window: {} steps with order {order}",
            truth.values.len()
        )));
    }
    Ok((&pred.values[order..], &truth.values[order..]))
}

/// Mean squared error over steps `order+1..=T`.
pub fn all_steps_mse(pred: &Trajectory, truth: &Trajectory, order: usize) -> Result<f64> {
    let (p, y) = window(pred, truth, order)?;
    Ok(p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64)
}

/// Mean absolute error over steps `order+1..=T`.
pub fn all_steps_mae(pred: &Trajectory, truth: &Trajectory, order: usize) -> Result<f64> {
    let (p, y) = window(pred, truth, order)?;
    Ok(p.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation as the Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::validation(format!(
            "length mismatch: {} vs {} values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::DegenerateRanking(format!(
            "need at least 2 points, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value in ranking".into()));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
        .ok_or_else(|| Error::DegenerateRanking("zero rank variance".into()))
}

/// Spearman correlation between predicted and true final-step values keyed
/// by test example; both maps must have the same keys.
pub fn spearman_final_step(preds: &BTreeMap<ExampleId, f64>, truths: &BTreeMap<ExampleId, f64>) -> Result<f64> {
    if !preds.keys().eq(truths.keys()) {
        return Err(Error::validation("predicted and true test ids differ"));
    }
    let p: Vec<f64> = preds.values().copied().collect();
    let t: Vec<f64> = truths.values().copied().collect();
    spearman(&p, &t)
}

/// Scores of one (run, test example) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub run_id: String,
    pub test_id: ExampleId,
    pub mse: f64,
    pub mae: f64,
    pub pred_final: f64,
    pub truth_final: f64,
}

impl PairScore {
    pub fn new(run_id: &str, pred: &Trajectory, truth: &Trajectory, order: usize) -> Result<Self> {
        Ok(PairScore {
            run_id: run_id.to_string(),
            test_id: truth.test_id.clone(),
            mse: all_steps_mse(pred, truth, order)?,
            mae: all_steps_mae(pred, truth, order)?,
            pred_final: *pred.values.last().expect("window is non-empty"),
            truth_final: *truth.values.last().expect("window is non-empty"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean and population std over all (run, test) pairs.
    pub mse: f64,
    pub mse_std: f64,
    pub mae: f64,
    pub mae_std: f64,
    /// Mean and population std over runs of the per-run Spearman
    /// correlation; runs whose ranking is degenerate are left out.
    pub spearman: Option<f64>,
    pub spearman_std: Option<f64>,
    /// Std over runs of the per-run mean MSE and MAE.
    pub mse_run_std: f64,
    pub mae_run_std: f64,
    pub n_runs: usize,
    pub n_pairs: usize,
    /// Number of runs contributing to the Spearman mean.
    pub spearman_runs: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregates pair scores. The result does not depend on input order.
pub fn aggregate(scores: &[PairScore]) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::validation("nothing to aggregate"));
    }
    let mut sorted: Vec<&PairScore> = scores.iter().collect();
    sorted.sort_by(|a, b| (&a.run_id, &a.test_id).cmp(&(&b.run_id, &b.test_id)));
    let mse: Vec<f64> = sorted.iter().map(|s| s.mse).collect();
    let mae: Vec<f64> = sorted.iter().map(|s| s.mae).collect();
    let (mse_mean, mse_std) = mean_std(&mse);
    let (mae_mean, mae_std) = mean_std(&mae);

    let mut by_run: BTreeMap<&str, Vec<&PairScore>> = BTreeMap::new();
    for s in &sorted {
        by_run.entry(s.run_id.as_str()).or_default().push(s);
    }
    let mut run_mse = Vec::new();
    let mut run_mae = Vec::new();
    let mut rhos = Vec::new();
    for (run_id, pairs) in &by_run {
        run_mse.push(pairs.iter().map(|s| s.mse).sum::<f64>() / pairs.len() as f64);
        run_mae.push(pairs.iter().map(|s| s.mae).sum::<f64>() / pairs.len() as f64);
        let p: Vec<f64> = pairs.iter().map(|s| s.pred_final).collect();
        let t: Vec<f64> = pairs.iter().map(|s| s.truth_final).collect();
        match spearman(&p, &t) {
            Ok(rho) => rhos.push(rho),
            Err(Error::DegenerateRanking(why)) => {
                log::debug!("run '{run_id}' excluded from Spearman: {why}");
            }
            Err(e) => return Err(e),
        }
    }
    let (spearman, spearman_std) = if rhos.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&rhos);
        (Some(m), Some(s))
    };
    Ok(EvalReport {
        mse: mse_mean,
        mse_std,
        mae: mae_mean,
        mae_std,
        spearman,
        spearman_std,
        mse_run_std: mean_std(&run_mse).1,
        mae_run_std: mean_std(&run_mae).1,
        n_runs: by_run.len(),
        n_pairs: sorted.len(),
        spearman_runs: rhos.len(),
    })
}

/// Pairs every true trajectory of `metric` with its prediction.
pub fn score_runs(pred: &RunSet, truth: &RunSet, metric: &MetricKind, order: usize) -> Result<Vec<PairScore>> {
    let mut out = Vec::new();
    for run in truth.iter() {
        let p_run = pred
            .get(&run.run_id)
            .ok_or_else(|| Error::validation(format!("no prediction for run '{}'", run.run_id)))?;
        for tr in run.trajectories_for(metric) {
            let p = p_run.trajectory(tr.test_id.as_str(), metric).ok_or_else(|| {
                Error::validation(format!(
                    "no prediction for run '{}', test '{}', metric '{metric}'",
                    run.run_id, tr.test_id
                ))
            })?;
            out.push(PairScore::new(&run.run_id, p, tr, order)?);
        }
    }
    Ok(out)
}

/// One report per metric present in `truth`, keyed by metric name.
pub fn evaluate(pred: &RunSet, truth: &RunSet, order: usize) -> Result<BTreeMap<String, EvalReport>> {
    let mut metrics: Vec<MetricKind> = truth
        .iter()
        .flat_map(|r| r.trajectories.iter().map(|t| t.metric.clone()))
        .collect();
    metrics.sort_by(|a, b| a.as_str().cmp(b.as_str()));
    metrics.dedup();
    if metrics.is_empty() {
        return Err(Error::validation("no trajectories to evaluate"));
    }
    metrics
        .iter()
        .map(|m| Ok((m.as_str().to_string(), aggregate(&score_runs(pred, truth, m, order)?)?)))
        .collect()
}

/// Long-format rows `run_id,test_id,metric,step,pred,truth` for every
/// step of every true trajectory; `step` is 1-based.
pub fn write_long_csv(pred: &RunSet, truth: &RunSet, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io_err = |e: csv::Error| Error::io("<csv>", e.into());
    w.write_record(["run_id", "test_id", "metric", "step", "pred", "truth"])
        .map_err(io_err)?;
    for run in truth.iter() {
        let p_run = pred
            .get(&run.run_id)
            .ok_or_else(|| Error::validation(format!("no prediction for run '{}'", run.run_id)))?;
        for tr in &run.trajectories {
            let p = p_run
                .trajectory(tr.test_id.as_str(), &tr.metric)
                .ok_or_else(|| Error::validation(format!("no prediction for '{}'", tr.test_id)))?;
            for (t, (a, b)) in p.values.iter().zip(&tr.values).enumerate() {
                w.write_record([
                    run.run_id.as_str(),
                    tr.test_id.as_str(),
                    tr.metric.as_str(),
                    &(t + 1).to_string(),
                    &a.to_string(),
                    &b.to_string(),
                ])
                .map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}
