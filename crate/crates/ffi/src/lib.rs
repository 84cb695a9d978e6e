//! C ABI over `fluence-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_load` or
//! `fluence_fit` and released with the matching `*_free`. Every call returns
//! a [`FluenceStatus`]; on failure `fluence_last_error` describes the cause
//! for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use fluence_core::dynamics::{load_runs, MetricKind, RunSet, Trajectory};
use fluence_core::embeddings::{load_embeddings, EmbeddingTable};
use fluence_core::metrics::{all_steps_mse, spearman};
use fluence_core::simulator::{fit, influence_factors, load_model, rollout, save_model, SimulatorConfig, SimulatorParams};
use fluence_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FluenceStatus {
    Ok = 0,
    Validation = 1,
    Io = 2,
    Numerical = 3,
    NullPointer = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

pub struct FluenceRunSet(RunSet);
pub struct FluenceEmbeddings(EmbeddingTable);
pub struct FluenceModel(SimulatorParams);

/// Fit settings. Obtain defaults from `fluence_fit_config_default`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct FluenceFitConfig {
    pub order: usize,
    pub proj_dim: usize,
    pub share_projections: bool,
    pub l2_lambda: f64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// 0 disables early stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(FluenceStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            2 => FluenceStatus::Io,
            3 => FluenceStatus::Numerical,
            _ => FluenceStatus::Validation,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FluenceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FluenceStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FluenceStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(FluenceStatus::NullPointer, format!("{name} is null"))
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn string(p: *const c_char, name: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_string)
        .map_err(|_| Failure(FluenceStatus::Validation, format!("{name} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut T, v: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(v);
    Ok(())
}

/// Message for the most recent failed call on this thread, or NULL. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fluence_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn fluence_fit_config_default() -> FluenceFitConfig {
    let d = SimulatorConfig::default();
    FluenceFitConfig {
        order: d.order,
        proj_dim: d.proj_dim,
        share_projections: d.share_projections,
        l2_lambda: d.l2_lambda,
        learning_rate: d.learning_rate,
        warmup_steps: d.warmup_steps,
        max_epochs: d.max_epochs,
        batch_size: d.batch_size,
        early_stop_patience: d.early_stop_patience,
        seed: d.seed,
    }
}

/// Loads a run file or a directory of run files.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fluence_runs_load(path: *const c_char, out: *mut *mut FluenceRunSet) -> FluenceStatus {
    guard(|| {
        let path = PathBuf::from(string(path, "path")?);
        let runs = load_runs(path)?;
        put(out, Box::into_raw(Box::new(FluenceRunSet(runs))), "out")
    })
}

/// # Safety
/// `runs` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fluence_runs_len(runs: *const FluenceRunSet, out: *mut usize) -> FluenceStatus {
    guard(|| put(out, deref(runs, "runs")?.0.len(), "out"))
}

/// # Safety
/// `runs` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fluence_runs_free(runs: *mut FluenceRunSet) {
    if !runs.is_null() {
        drop(Box::from_raw(runs));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fluence_embeddings_load(path: *const c_char, out: *mut *mut FluenceEmbeddings) -> FluenceStatus {
    guard(|| {
        let path = PathBuf::from(string(path, "path")?);
        let table = load_embeddings(path)?;
        put(out, Box::into_raw(Box::new(FluenceEmbeddings(table))), "out")
    })
}

/// # Safety
/// `emb` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fluence_embeddings_dim(emb: *const FluenceEmbeddings, out: *mut usize) -> FluenceStatus {
    guard(|| put(out, deref(emb, "emb")?.0.dim(), "out"))
}

/// # Safety
/// `emb` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fluence_embeddings_free(emb: *mut FluenceEmbeddings) {
    if !emb.is_null() {
        drop(Box::from_raw(emb));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fluence_model_load(path: *const c_char, out: *mut *mut FluenceModel) -> FluenceStatus {
    guard(|| {
        let path = PathBuf::from(string(path, "path")?);
        let params = load_model(path)?;
        put(out, Box::into_raw(Box::new(FluenceModel(params))), "out")
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fluence_model_save(model: *const FluenceModel, path: *const c_char) -> FluenceStatus {
    guard(|| {
        let model = deref(model, "model")?;
        let path = PathBuf::from(string(path, "path")?);
        Ok(save_model(&model.0, path)?)
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fluence_model_free(model: *mut FluenceModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Fits the simulator. `metric` may be NULL for test loss.
///
/// # Safety
/// Handles must be live, `config` readable, `metric` NULL or a
/// NUL-terminated string, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fluence_fit(
    train: *const FluenceRunSet,
    val: *const FluenceRunSet,
    emb: *const FluenceEmbeddings,
    config: *const FluenceFitConfig,
    metric: *const c_char,
    out: *mut *mut FluenceModel,
) -> FluenceStatus {
    guard(|| {
        let train = &deref(train, "train")?.0;
        let val = &deref(val, "val")?.0;
        let emb = &deref(emb, "emb")?.0;
        let c = deref(config, "config")?;
        let metric = if metric.is_null() {
            MetricKind::Loss
        } else {
            MetricKind::parse(&string(metric, "metric")?)?
        };
        let config = SimulatorConfig {
            order: c.order,
            embed_dim: emb.dim(),
            proj_dim: c.proj_dim,
            share_projections: c.share_projections,
            l2_lambda: c.l2_lambda,
            learning_rate: c.learning_rate,
            warmup_steps: c.warmup_steps,
            max_epochs: c.max_epochs,
            batch_size: c.batch_size,
            early_stop_patience: c.early_stop_patience,
            seed: c.seed,
            metric,
        };
        let (params, _) = fit(train, val, emb, &config)?;
        put(out, Box::into_raw(Box::new(FluenceModel(params))), "out")
    })
}

/// Rolls the model out for `test_id` on run `run_index` into `values`.
/// `out_len` always receives the trajectory length; if it exceeds
/// `capacity` nothing is written and `BufferTooSmall` is returned.
///
/// # Safety
/// Handles must be live, `test_id` a NUL-terminated string, `values`
/// writable for `capacity` doubles and `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn fluence_rollout(
    model: *const FluenceModel,
    runs: *const FluenceRunSet,
    run_index: usize,
    emb: *const FluenceEmbeddings,
    test_id: *const c_char,
    values: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> FluenceStatus {
    guard(|| {
        let model = &deref(model, "model")?.0;
        let runs = &deref(runs, "runs")?.0;
        let emb = &deref(emb, "emb")?.0;
        let test_id = string(test_id, "test_id")?;
        let run = runs.runs().get(run_index).ok_or_else(|| {
            Failure(
                FluenceStatus::Validation,
                format!("run index {run_index} out of range for {} runs", runs.len()),
            )
        })?;
        let traj = rollout(model, run, emb, &test_id)?;
        put(out_len, traj.values.len(), "out_len")?;
        if traj.values.len() > capacity {
            return Err(Failure(
                FluenceStatus::BufferTooSmall,
                format!("need {} values, buffer holds {capacity}", traj.values.len()),
            ));
        }
        if values.is_null() {
            return Err(null("values"));
        }
        ptr::copy_nonoverlapping(traj.values.as_ptr(), values, traj.values.len());
        Ok(())
    })
}

/// Writes the `order` lag factors `A[i][j]` into `alpha` and the additive
/// factor into `beta`.
///
/// # Safety
/// Handles must be live, ids NUL-terminated strings, `alpha` writable for
/// `capacity` doubles and `beta` writable.
#[no_mangle]
pub unsafe extern "C" fn fluence_influence_factors(
    model: *const FluenceModel,
    emb: *const FluenceEmbeddings,
    train_id: *const c_char,
    test_id: *const c_char,
    alpha: *mut f64,
    capacity: usize,
    beta: *mut f64,
) -> FluenceStatus {
    guard(|| {
        let model = &deref(model, "model")?.0;
        let emb = &deref(emb, "emb")?.0;
        let h_train = emb.require(&string(train_id, "train_id")?)?;
        let h_test = emb.require(&string(test_id, "test_id")?)?;
        let (a, b) = influence_factors(model, h_train, h_test)?;
        if a.len() > capacity {
            return Err(Failure(
                FluenceStatus::BufferTooSmall,
                format!("need {} lag factors, buffer holds {capacity}", a.len()),
            ));
        }
        if alpha.is_null() {
            return Err(null("alpha"));
        }
        ptr::copy_nonoverlapping(a.as_ptr(), alpha, a.len());
        put(beta, b, "beta")
    })
}

/// All-steps MSE of `pred` against `truth`, skipping the first `order` steps.
///
/// # Safety
/// `pred` and `truth` must be readable for `len` doubles, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fluence_all_steps_mse(
    pred: *const f64,
    truth: *const f64,
    len: usize,
    order: usize,
    out: *mut f64,
) -> FluenceStatus {
    guard(|| {
        let wrap = |values: &[f64]| Trajectory {
            test_id: fluence_core::dynamics::ExampleId::new("ffi").expect("non-empty id"),
            metric: MetricKind::Loss,
            values: values.to_vec(),
        };
        let p = wrap(slice(pred, len, "pred")?);
        let t = wrap(slice(truth, len, "truth")?);
        put(out, all_steps_mse(&p, &t, order)?, "out")
    })
}

/// Tie-corrected Spearman correlation of two samples.
///
/// # Safety
/// `xs` and `ys` must be readable for `len` doubles, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fluence_spearman(xs: *const f64, ys: *const f64, len: usize, out: *mut f64) -> FluenceStatus {
    guard(|| {
        let xs = slice(xs, len, "xs")?;
        let ys = slice(ys, len, "ys")?;
        put(out, spearman(xs, ys)?, "out")
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_map_onto_statuses() {
        assert_eq!(Failure::from(Error::Numerical("x".into())).0, FluenceStatus::Numerical);
        assert_eq!(
            Failure::from(Error::UnknownExample("x".into())).0,
            FluenceStatus::Validation
        );
    }

    #[test]
    fn panics_are_contained() {
        let status = guard(|| panic!("boom"));
        assert_eq!(status, FluenceStatus::Panic);
        let msg = unsafe { CStr::from_ptr(fluence_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "panic: boom");
    }

    #[test]
    fn success_clears_the_last_error() {
        guard(|| Err(null("x")));
        assert!(!fluence_last_error().is_null());
        guard(|| Ok(()));
        assert!(fluence_last_error().is_null());
    }
}
