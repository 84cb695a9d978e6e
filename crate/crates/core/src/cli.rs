//! Command-line front end for the `fluence` binary.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::baselines::{
    load_dump, save_dump, simfluence_fit, simfluence_simulate_runs, tracin_simulate, tracin_simulate_runs,
    GradientDump,
};
use crate::dynamics::io::file_stem_for;
use crate::dynamics::{load_runs, save_runs, split_runs, ExampleId, MetricKind, Run, RunSet};
use crate::embeddings::{load_embeddings, save_embeddings, EmbeddingTable};
use crate::error::{Error, Result};
use crate::experiments::{interval_ablation, order_ablation, reduce_check, write_ablation_csv, Splits};
use crate::metrics::{evaluate, write_long_csv};
use crate::mislabel::{
    detection_curve, self_influence_featurized, self_influence_tracin, shuffled_baseline, write_curve_csv,
};
use crate::simulator::{fit, load_model, save_model, simulate_runs, SimulatorConfig};
use crate::synthetic::{corrupt_labels, make_toy_dataset, toy_runs_on, PlantedConfig, PlantedWorld, ToyConfig};

/// Seed used when neither a flag, the settings file nor `FLUENCE_SEED` sets one.
pub const DEFAULT_SEED: u64 = 42;

/// Agreement required of the one-hot reduction.
pub const REDUCTION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "fluence", version, about = "Simulate how training examples shape test metrics")]
pub struct Cli {
    /// Worker threads. Outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Settings file of `key = value` lines, optionally grouped under
    /// `[command-name]` headers. Flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate planted or toy-classifier runs with known ground truth.
    GenerateSynthetic(GenerateArgs),
    /// Fit the featurized simulator.
    Fit(FitArgs),
    /// Roll a fitted simulator out over runs.
    Simulate(SimulateArgs),
    /// Score predicted trajectories against recorded ones.
    Evaluate(EvaluateArgs),
    /// Simulate runs with a reference method.
    Baseline(BaselineArgs),
    /// Rank training examples by self-influence.
    RankMislabeled(RankArgs),
    /// Compare a one-hot featurized fit with the per-example simulator.
    ReduceCheck(ReduceArgs),
    /// Sweep checkpoint intervals or Markov orders.
    Ablate(AblateArgs),
}

impl Command {
    fn section(&self) -> &'static str {
        match self {
            Command::GenerateSynthetic(_) => "generate_synthetic",
            Command::Fit(_) => "fit",
            Command::Simulate(_) => "simulate",
            Command::Evaluate(_) => "evaluate",
            Command::Baseline(_) => "baseline",
            Command::RankMislabeled(_) => "rank_mislabeled",
            Command::ReduceCheck(_) => "reduce_check",
            Command::Ablate(_) => "ablate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Planted,
    Toy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineMethod {
    Tracin,
    Graddot,
    Simfluence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RankMethod {
    Featurized,
    Tracin,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub kind: Option<Kind>,
    /// Number of runs.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Training pool size.
    #[arg(long)]
    pub pool: Option<usize>,
    /// Distinct examples sampled per run.
    #[arg(long)]
    pub per_run: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub test_pool: Option<usize>,
    /// Planted: Markov order of the true dynamics.
    #[arg(long)]
    pub order: Option<usize>,
    /// Planted: embedding width.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Planted: rank of the true projections.
    #[arg(long)]
    pub proj_dim: Option<usize>,
    /// Planted: std of the Gaussian noise added to each step.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Planted: loss, bleu or rouge_l.
    #[arg(long)]
    pub metric: Option<String>,
    /// Planted: share of the pool never used by the generated runs.
    #[arg(long)]
    pub unseen_fraction: Option<f64>,
    #[arg(long)]
    pub factor_spread: Option<f64>,
    #[arg(long)]
    pub persistence: Option<f64>,
    /// Toy: number of classes.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Toy: input feature width.
    #[arg(long)]
    pub features: Option<usize>,
    /// Toy: SGD learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub separation: Option<f64>,
    /// Toy: steps between gradient dumps; 0 disables.
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    /// Toy: also dump each training example's dot with itself.
    #[arg(long)]
    pub self_pairs: bool,
    /// Toy: share of training labels to flip before training.
    #[arg(long)]
    pub corruption: Option<f64>,
    /// Write `train/`, `val/` and `test/` run directories of these sizes
    /// instead of a single `runs/`.
    #[arg(long, value_name = "TRAIN,VAL,TEST", value_delimiter = ',')]
    pub split: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitFlags {
    /// Metric to simulate: loss, bleu, rouge_l or a custom name.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long)]
    pub proj_dim: Option<usize>,
    /// Tie the train-side projections across lags.
    #[arg(long)]
    pub share_projections: bool,
    /// L2 penalty weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training targets per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[command(flatten)]
    pub fit: FitFlags,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-epoch fit report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Directory for the predicted runs.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Leading seeded steps excluded from scoring.
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write long-format per-step rows.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: BaselineMethod,
    /// Runs to simulate.
    #[arg(long)]
    pub runs: PathBuf,
    /// Gradient dump shared by every run.
    #[arg(long, conflicts_with = "dumps")]
    pub dump: Option<PathBuf>,
    /// Directory of per-run dumps named `<run_id>.jsonl`.
    #[arg(long)]
    pub dumps: Option<PathBuf>,
    /// Simfluence: training runs.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Simfluence: validation runs.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[command(flatten)]
    pub fit: FitFlags,
    /// Directory for the predicted runs.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long, value_enum)]
    pub method: Option<RankMethod>,
    /// Featurized: fitted model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Featurized: embedding table.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Featurized: runs whose training ids are ranked.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    /// Tracin: dump holding self pairs.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Ids known to be mislabeled, one per line. With it `--out` receives
    /// the detection curve, otherwise the ranking.
    #[arg(long)]
    pub flipped: Option<PathBuf>,
    /// Shuffles averaged into the random baseline.
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the ranking here.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReduceArgs {
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[command(flatten)]
    pub fit: FitFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// All runs; split into train, validation and test.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, value_delimiter = ',', conflicts_with = "orders")]
    pub intervals: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub orders: Option<Vec<usize>>,
    /// Run counts; defaults to a sixth each for validation and test.
    #[arg(long, value_name = "TRAIN,VAL,TEST", value_delimiter = ',')]
    pub split: Option<Vec<usize>>,
    #[command(flatten)]
    pub fit: FitFlags,
    /// CSV with one row per setting.
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings file values, looked up in the command's section first.
struct Settings {
    section: &'static str,
    top: toml::Table,
    scoped: toml::Table,
    used: Mutex<BTreeSet<String>>,
}

fn normalize(table: toml::Table) -> toml::Table {
    table
        .into_iter()
        .map(|(k, v)| {
            let v = match v {
                toml::Value::Table(t) => toml::Value::Table(normalize(t)),
                other => other,
            };
            (k.replace('-', "_"), v)
        })
        .collect()
}

impl Settings {
    fn load(path: Option<&Path>, section: &'static str) -> Result<Self> {
        let mut top = match path {
            None => toml::Table::new(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
                    location: p.display().to_string(),
                    message: e.message().to_string(),
                })?;
                normalize(table)
            }
        };
        let scoped = match top.remove(section) {
            Some(toml::Value::Table(t)) => t,
            Some(_) => return Err(Error::validation(format!("settings: '{section}' must be a section"))),
            None => toml::Table::new(),
        };
        top.retain(|_, v| !v.is_table());
        Ok(Settings {
            section,
            top,
            scoped,
            used: Mutex::new(BTreeSet::new()),
        })
    }

    fn lookup<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        let value = self.scoped.get(key).or_else(|| self.top.get(key));
        let Some(value) = value else {
            return Ok(None);
        };
        self.used.lock().expect("settings lock").insert(key.to_string());
        value
            .clone()
            .try_into()
            .map(Some)
            .map_err(|e: toml::de::Error| Error::validation(format!("settings key '{key}': {}", e.message())))
    }

    fn get<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    fn opt<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.lookup(key),
        }
    }

    fn switch(&self, flag: bool, key: &str, default: bool) -> Result<bool> {
        self.get(flag.then_some(true), key, default)
    }

    fn metric(&self, flag: &Option<String>, default: MetricKind) -> Result<MetricKind> {
        match self.opt(flag.clone(), "metric")? {
            Some(name) => MetricKind::parse(&name),
            None => Ok(default),
        }
    }

    /// Flag, then settings file, then `FLUENCE_SEED`, then [`DEFAULT_SEED`].
    fn seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = self.opt(flag, "seed")? {
            return Ok(s);
        }
        match std::env::var("FLUENCE_SEED") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("FLUENCE_SEED is not an unsigned integer: '{v}'"))),
            Err(_) => Ok(DEFAULT_SEED),
        }
    }

    fn warn_unused(&self) {
        let used = self.used.lock().expect("settings lock");
        for key in self.scoped.keys().chain(self.top.keys()) {
            if !used.contains(key) {
                warn!("settings key '{key}' is not used by {}", self.section.replace('_', "-"));
            }
        }
    }
}

fn parse_kind(flag: Option<Kind>, s: &Settings) -> Result<Kind> {
    if let Some(k) = flag {
        return Ok(k);
    }
    let name: String = s
        .lookup("kind")?
        .ok_or_else(|| Error::InvalidArgument("--kind is required (planted or toy)".into()))?;
    Kind::from_str(&name, true).map_err(|_| Error::InvalidArgument(format!("unknown kind '{name}'")))
}

impl FitFlags {
    fn resolve(&self, s: &Settings, embed_dim: usize) -> Result<SimulatorConfig> {
        let d = SimulatorConfig::default();
        let config = SimulatorConfig {
            order: s.get(self.order, "order", d.order)?,
            embed_dim,
            proj_dim: s.get(self.proj_dim, "proj_dim", d.proj_dim)?,
            share_projections: s.switch(self.share_projections, "share_projections", d.share_projections)?,
            l2_lambda: s.get(self.lambda, "lambda", d.l2_lambda)?,
            learning_rate: s.get(self.lr, "lr", d.learning_rate)?,
            warmup_steps: s.get(self.warmup, "warmup", d.warmup_steps)?,
            max_epochs: s.get(self.epochs, "epochs", d.max_epochs)?,
            batch_size: s.get(self.batch_size, "batch_size", d.batch_size)?,
            early_stop_patience: s.get(self.patience, "patience", d.early_stop_patience)?,
            seed: s.seed(self.seed)?,
            metric: s.metric(&self.metric, d.metric)?,
        };
        config.validate()?;
        Ok(config)
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(file))
}

fn finish(mut w: BufWriter<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, e.into()))?;
    text.push('\n');
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    finish(w, path)
}

fn write_ids<'a>(path: &Path, ids: impl IntoIterator<Item = &'a ExampleId>) -> Result<()> {
    let mut w = create(path)?;
    for id in ids {
        writeln!(w, "{id}").map_err(|e| Error::io(path, e))?;
    }
    finish(w, path)
}

fn read_ids(path: &Path) -> Result<BTreeSet<ExampleId>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(ExampleId::new)
        .collect()
}

fn split_sizes(split: Option<Vec<usize>>, total: usize) -> Result<(usize, usize, usize)> {
    match split.as_deref() {
        Some([a, b, c]) => Ok((*a, *b, *c)),
        Some(other) => Err(Error::InvalidArgument(format!(
            "--split needs three counts TRAIN,VAL,TEST, got {}",
            other.len()
        ))),
        None => {
            let held = (total / 6).max(1);
            if total < 2 * held + 1 {
                return Err(Error::InsufficientRuns {
                    requested: 2 * held + 1,
                    available: total,
                });
            }
            Ok((total - 2 * held, held, held))
        }
    }
}

fn save_split(runs: &RunSet, out: &Path, split: Option<Vec<usize>>, seed: u64) -> Result<()> {
    if split.is_none() {
        return save_runs(runs, out.join("runs"));
    }
    let (a, b, c) = split_sizes(split, runs.len())?;
    let (train, val, test) = split_runs(runs, a, b, c, seed)?;
    save_runs(&train, out.join("train"))?;
    save_runs(&val, out.join("val"))?;
    save_runs(&test, out.join("test"))
}

fn generate(a: &GenerateArgs, s: &Settings) -> Result<()> {
    let kind = parse_kind(a.kind, s)?;
    let seed = s.seed(a.seed)?;
    let n_runs = s.get(a.runs, "runs", 32)?;
    let split = s.opt(a.split.clone(), "split")?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    match kind {
        Kind::Planted => {
            let d = PlantedConfig::default();
            let cfg = PlantedConfig {
                order: s.get(a.order, "order", d.order)?,
                embed_dim: s.get(a.embed_dim, "embed_dim", d.embed_dim)?,
                proj_dim: s.get(a.proj_dim, "proj_dim", d.proj_dim)?,
                pool_size: s.get(a.pool, "pool", d.pool_size)?,
                test_pool: s.get(a.test_pool, "test_pool", d.test_pool)?,
                per_run: s.get(a.per_run, "per_run", d.per_run)?,
                steps: s.get(a.steps, "steps", d.steps)?,
                batch_size: s.get(a.batch_size, "batch_size", d.batch_size)?,
                noise_sigma: s.get(a.noise, "noise", d.noise_sigma)?,
                metric: s.metric(&a.metric, d.metric)?,
                factor_spread: s.get(a.factor_spread, "factor_spread", d.factor_spread)?,
                persistence: s.get(a.persistence, "persistence", d.persistence)?,
                unseen_fraction: s.get(a.unseen_fraction, "unseen_fraction", d.unseen_fraction)?,
            };
            let world = PlantedWorld::new(cfg, seed)?;
            let runs = world.runs(n_runs)?;
            save_split(&runs, &a.out, split, seed)?;
            save_embeddings(&world.embeddings, a.out.join("embeddings.jsonl"))?;
            save_model(&world.params, a.out.join("true_model.json"))?;
            write_json(&a.out.join("config.json"), &world.config)?;
            if !world.unseen.is_empty() {
                write_ids(&a.out.join("unseen.txt"), &world.unseen)?;
            }
            info!("wrote {} planted runs to {}", runs.len(), a.out.display());
        }
        Kind::Toy => {
            let d = ToyConfig::default();
            let cfg = ToyConfig {
                classes: s.get(a.classes, "classes", d.classes)?,
                features: s.get(a.features, "features", d.features)?,
                pool_size: s.get(a.pool, "pool", d.pool_size)?,
                test_pool: s.get(a.test_pool, "test_pool", d.test_pool)?,
                per_run: s.get(a.per_run, "per_run", d.per_run)?,
                steps: s.get(a.steps, "steps", d.steps)?,
                batch_size: s.get(a.batch_size, "batch_size", d.batch_size)?,
                learning_rate: s.get(a.lr, "lr", d.learning_rate)?,
                separation: s.get(a.separation, "separation", d.separation)?,
                checkpoint_interval: s.get(a.checkpoint_interval, "checkpoint_interval", d.checkpoint_interval)?,
                self_pairs: s.switch(a.self_pairs, "self_pairs", d.self_pairs)?,
            };
            cfg.validate()?;
            let rho = s.get(a.corruption, "corruption", 0.0)?;
            let mut data = make_toy_dataset(&cfg, seed)?;
            if rho > 0.0 {
                let (corrupted, flipped) = corrupt_labels(&data, rho, seed)?;
                write_ids(&a.out.join("flipped.txt"), &flipped)?;
                data = corrupted;
            }
            let out = toy_runs_on(&data, &cfg, n_runs, seed)?;
            save_split(&out.runs, &a.out, split, seed)?;
            save_embeddings(&out.embeddings, a.out.join("embeddings.jsonl"))?;
            for sub in ["dumps", "final_dumps"] {
                let dir = a.out.join(sub);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            for rec in &out.records {
                let stem = file_stem_for(&rec.run.run_id);
                if let Some(dump) = &rec.dump {
                    save_dump(dump, a.out.join("dumps").join(format!("{stem}.jsonl")))?;
                }
                save_dump(&rec.final_dump, a.out.join("final_dumps").join(format!("{stem}.jsonl")))?;
            }
            write_json(&a.out.join("config.json"), &cfg)?;
            info!("wrote {} toy runs to {}", out.runs.len(), a.out.display());
        }
    }
    Ok(())
}

fn fit_cmd(a: &FitArgs, s: &Settings) -> Result<()> {
    let train = load_runs(&a.runs)?;
    let val = load_runs(&a.val)?;
    let emb = load_embeddings(&a.embeddings)?;
    let config = a.fit.resolve(s, emb.dim())?;
    let (params, report) = fit(&train, &val, &emb, &config)?;
    info!(
        "best epoch {} of {}: validation MSE {:.6e}",
        report.best_epoch,
        report.epochs_run,
        report.val_all_steps_mse_per_epoch[report.best_epoch - 1]
    );
    save_model(&params, &a.out)?;
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    Ok(())
}

fn simulate_cmd(a: &SimulateArgs) -> Result<()> {
    let params = load_model(&a.model)?;
    let runs = load_runs(&a.runs)?;
    let emb = load_embeddings(&a.embeddings)?;
    save_runs(&simulate_runs(&params, &runs, &emb)?, &a.out)
}

fn evaluate_cmd(a: &EvaluateArgs, s: &Settings) -> Result<()> {
    let pred = load_runs(&a.pred)?;
    let truth = load_runs(&a.truth)?;
    let order = s.get(a.order, "order", 1)?;
    let report = evaluate(&pred, &truth, order)?;
    write_json(&a.out, &report)?;
    if let Some(path) = &a.csv {
        let mut w = create(path)?;
        write_long_csv(&pred, &truth, &mut w)?;
        finish(w, path)?;
    }
    Ok(())
}

fn per_run_dumps(runs: &RunSet, dir: &Path, single: bool) -> Result<RunSet> {
    let predicted = runs
        .iter()
        .map(|run| {
            let path = dir.join(format!("{}.jsonl", file_stem_for(&run.run_id)));
            let dump = load_dump(&path)?;
            if single {
                require_single(&dump, &path)?;
            }
            simulate_with(&dump, run)
        })
        .collect::<Result<Vec<_>>>()?;
    RunSet::new(predicted)
}

fn simulate_with(dump: &GradientDump, run: &Run) -> Result<Run> {
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
}

fn require_single(dump: &GradientDump, path: &Path) -> Result<()> {
    if dump.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "{}: grad-dot needs a dump with exactly one checkpoint, got {}",
            path.display(),
            dump.len()
        )));
    }
    Ok(())
}

fn baseline_cmd(a: &BaselineArgs, s: &Settings) -> Result<()> {
    let runs = load_runs(&a.runs)?;
    let predicted = match a.method {
        BaselineMethod::Tracin | BaselineMethod::Graddot => {
            let single = a.method == BaselineMethod::Graddot;
            match (&a.dump, &a.dumps) {
                (Some(path), None) => {
                    let dump = load_dump(path)?;
                    if single {
                        require_single(&dump, path)?;
                    }
                    tracin_simulate_runs(&dump, &runs)?
                }
                (None, Some(dir)) => per_run_dumps(&runs, dir, single)?,
                _ => return Err(Error::InvalidArgument("pass one of --dump or --dumps".into())),
            }
        }
        BaselineMethod::Simfluence => {
            let (Some(train), Some(val)) = (&a.train, &a.val) else {
                return Err(Error::InvalidArgument("simfluence needs --train and --val".into()));
            };
            let train = load_runs(train)?;
            let val = load_runs(val)?;
            let config = a.fit.resolve(s, 1)?;
            let (params, report) = simfluence_fit(&train, &val, &config)?;
            info!("simfluence: best epoch {} of {}", report.best_epoch, report.epochs_run);
            simfluence_simulate_runs(&params, &runs, &config.metric)?
        }
    };
    save_runs(&predicted, &a.out)
}

fn write_ranking(scores: &BTreeMap<ExampleId, f64>, path: &Path) -> Result<()> {
    let mut ranked: Vec<(&ExampleId, f64)> = scores.iter().map(|(k, v)| (k, *v)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut w = csv::Writer::from_writer(create(path)?);
    let fail = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["rank", "id", "score"]).map_err(fail)?;
    for (i, (id, v)) in ranked.iter().enumerate() {
        w.write_record([(i + 1).to_string(), id.to_string(), v.to_string()])
            .map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn rank_cmd(a: &RankArgs, s: &Settings) -> Result<()> {
    let method = match a.method {
        Some(m) => m,
        None => {
            let name: String = s.lookup("method")?.unwrap_or_else(|| "featurized".into());
            RankMethod::from_str(&name, true).map_err(|_| Error::InvalidArgument(format!("unknown method '{name}'")))?
        }
    };
    let scores: BTreeMap<ExampleId, f64> = match method {
        RankMethod::Featurized => {
            let (Some(model), Some(emb), Some(runs)) = (&a.model, &a.embeddings, &a.runs) else {
                return Err(Error::InvalidArgument(
                    "featurized ranking needs --model, --embeddings and --runs".into(),
                ));
            };
            let params = load_model(model)?;
            let emb: EmbeddingTable = load_embeddings(emb)?;
            load_runs(runs)?
                .train_ids()
                .into_iter()
                .map(|id| {
                    let v = self_influence_featurized(&params, &emb, id.as_str())?;
                    Ok((id, v))
                })
                .collect::<Result<_>>()?
        }
        RankMethod::Tracin => {
            let path = a
                .dump
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("tracin ranking needs --dump".into()))?;
            let dump = load_dump(path)?;
            let ids: BTreeSet<&ExampleId> = dump.checkpoints()[0]
                .dots
                .keys()
                .filter(|(a, b)| a == b)
                .map(|(a, _)| a)
                .collect();
            if ids.is_empty() {
                return Err(Error::validation(format!(
                    "{}: dump has no self pairs; generate it with self pairs enabled",
                    path.display()
                )));
            }
            ids.into_iter()
                .map(|id| Ok((id.clone(), self_influence_tracin(&dump, id.as_str())?)))
                .collect::<Result<_>>()?
        }
    };
    if let Some(path) = &a.scores {
        write_ranking(&scores, path)?;
    }
    match &a.flipped {
        None => write_ranking(&scores, &a.out),
        Some(flipped) => {
            let flipped = read_ids(flipped)?;
            let repeats = s.get(a.repeats, "repeats", 10)?;
            let seed = s.seed(a.seed)?;
            let curve = detection_curve(&scores, &flipped)?;
            let ids: BTreeSet<ExampleId> = scores.keys().cloned().collect();
            let shuffled = shuffled_baseline(&ids, &flipped, repeats, seed)?;
            let mut w = create(&a.out)?;
            write_curve_csv(&curve, Some(&shuffled), &mut w)?;
            finish(w, &a.out)
        }
    }
}

#[derive(Serialize)]
struct ReduceOutput {
    tolerance: f64,
    agrees: bool,
    #[serde(flatten)]
    report: crate::experiments::ReductionReport,
}

fn reduce_cmd(a: &ReduceArgs, s: &Settings) -> Result<()> {
    let train = load_runs(&a.runs)?;
    let val = load_runs(&a.val)?;
    let config = a.fit.resolve(s, 1)?;
    let report = reduce_check(&train, &val, &config)?;
    let agrees = report.max_loss_gap <= REDUCTION_TOLERANCE && report.max_rollout_gap <= REDUCTION_TOLERANCE;
    if agrees {
        info!("one-hot featurized fit agrees with the per-example fit");
    } else {
        warn!(
            "reduction gap exceeds {REDUCTION_TOLERANCE:e}: loss {:e}, rollout {:e}",
            report.max_loss_gap, report.max_rollout_gap
        );
    }
    write_json(
        &a.out,
        &ReduceOutput {
            tolerance: REDUCTION_TOLERANCE,
            agrees,
            report,
        },
    )
}

fn ablate_cmd(a: &AblateArgs, s: &Settings) -> Result<()> {
    let runs = load_runs(&a.runs)?;
    let emb = load_embeddings(&a.embeddings)?;
    let config = a.fit.resolve(s, emb.dim())?;
    let split = s.opt(a.split.clone(), "split")?;
    let (n_train, n_val, n_test) = split_sizes(split, runs.len())?;
    let (train, val, test) = split_runs(&runs, n_train, n_val, n_test, config.seed)?;
    let splits = Splits {
        train: &train,
        val: &val,
        test: &test,
        emb: &emb,
    };
    let intervals: Option<Vec<usize>> = s.opt(a.intervals.clone(), "intervals")?;
    let orders: Option<Vec<usize>> = s.opt(a.orders.clone(), "orders")?;
    let rows = match (intervals, orders) {
        (Some(ks), None) => interval_ablation(&splits, &config, &ks)?,
        (None, Some(ns)) => order_ablation(&splits, &config, &ns)?,
        _ => return Err(Error::InvalidArgument("pass exactly one of --intervals or --orders".into())),
    };
    let mut w = create(&a.out)?;
    write_ablation_csv(&rows, &mut w)?;
    finish(w, &a.out)
}

fn execute(command: &Command, s: &Settings) -> Result<()> {
    match command {
        Command::GenerateSynthetic(a) => generate(a, s),
        Command::Fit(a) => fit_cmd(a, s),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a, s),
        Command::Baseline(a) => baseline_cmd(a, s),
        Command::RankMislabeled(a) => rank_cmd(a, s),
        Command::ReduceCheck(a) => reduce_cmd(a, s),
        Command::Ablate(a) => ablate_cmd(a, s),
    }
}

/// Runs a parsed command on a pool of `cli.threads` workers.
pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::InvalidArgument("--threads must be >= 1".into()));
    }
    let settings = Settings::load(cli.config.as_deref(), cli.command.section())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {} workers: {e}", cli.threads)))?;
    pool.install(|| execute(&cli.command, &settings))?;
    settings.warn_unused();
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success or help, 1 for usage and validation errors, 2 for I/O
/// errors, 3 for numerical failures.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
