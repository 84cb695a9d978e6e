use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use fluence_core::dynamics::{save_runs, split_runs};
use fluence_core::embeddings::save_embeddings;
use fluence_core::synthetic::{generate_planted_runs, PlantedConfig};
use fluence_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(fluence_last_error()) }.to_str().unwrap().to_string()
}

struct Fixture {
    _dir: tempfile::TempDir,
    train: *mut FluenceRunSet,
    val: *mut FluenceRunSet,
    test: *mut FluenceRunSet,
    emb: *mut FluenceEmbeddings,
}

impl Fixture {
    fn new() -> Self {
        let cfg = PlantedConfig {
            pool_size: 40,
            per_run: 24,
            test_pool: 3,
            steps: 30,
            ..Default::default()
        };
        let (runs, emb, _) = generate_planted_runs(&cfg, 8, 9).unwrap();
        let (tr, va, te) = split_runs(&runs, 5, 2, 1, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_runs(&tr, dir.path().join("train")).unwrap();
        save_runs(&va, dir.path().join("val")).unwrap();
        save_runs(&te, dir.path().join("test")).unwrap();
        save_embeddings(&emb, dir.path().join("emb.jsonl")).unwrap();
        let mut f = Fixture {
            train: ptr::null_mut(),
            val: ptr::null_mut(),
            test: ptr::null_mut(),
            emb: ptr::null_mut(),
            _dir: dir,
        };
        let root = f._dir.path().to_path_buf();
        unsafe {
            assert_eq!(fluence_runs_load(cstr(&root.join("train")).as_ptr(), &mut f.train), FluenceStatus::Ok);
            assert_eq!(fluence_runs_load(cstr(&root.join("val")).as_ptr(), &mut f.val), FluenceStatus::Ok);
            assert_eq!(fluence_runs_load(cstr(&root.join("test")).as_ptr(), &mut f.test), FluenceStatus::Ok);
            assert_eq!(fluence_embeddings_load(cstr(&root.join("emb.jsonl")).as_ptr(), &mut f.emb), FluenceStatus::Ok);
        }
        f
    }

    fn fit(&self) -> *mut FluenceModel {
        let mut cfg = fluence_fit_config_default();
        cfg.proj_dim = 8;
        cfg.learning_rate = 1e-2;
        cfg.max_epochs = 5;
        cfg.warmup_steps = 2;
        let mut model = ptr::null_mut();
        let status = unsafe { fluence_fit(self.train, self.val, self.emb, &cfg, ptr::null(), &mut model) };
        assert_eq!(status, FluenceStatus::Ok, "{}", last_error());
        model
    }
}

impl Drop for Fixture {
    fn drop(&mut self) {
        unsafe {
            fluence_runs_free(self.train);
            fluence_runs_free(self.val);
            fluence_runs_free(self.test);
            fluence_embeddings_free(self.emb);
        }
    }
}

#[test]
fn fit_and_roll_out_through_handles() {
    let f = Fixture::new();
    let mut n = 0;
    unsafe {
        assert_eq!(fluence_runs_len(f.train, &mut n), FluenceStatus::Ok);
        assert_eq!(n, 5);
        assert_eq!(fluence_embeddings_dim(f.emb, &mut n), FluenceStatus::Ok);
        assert_eq!(n, 16);
    }
    let model = f.fit();
    let test_id = CString::new("test-000").unwrap();
    let mut values = vec![0.0; 30];
    let mut len = 0;
    unsafe {
        let s = fluence_rollout(model, f.test, 0, f.emb, test_id.as_ptr(), values.as_mut_ptr(), 30, &mut len);
        assert_eq!(s, FluenceStatus::Ok, "{}", last_error());
    }
    assert_eq!(len, 30);
    assert!(values.iter().all(|v| v.is_finite()));

    let mut small = vec![0.0; 4];
    unsafe {
        let s = fluence_rollout(model, f.test, 0, f.emb, test_id.as_ptr(), small.as_mut_ptr(), 4, &mut len);
        assert_eq!(s, FluenceStatus::BufferTooSmall);
    }
    assert_eq!(len, 30);
    assert_eq!(small, [0.0; 4]);

    let train_id = CString::new("train-000").unwrap();
    let (mut alpha, mut beta) = ([0.0; 1], 0.0);
    unsafe {
        let s = fluence_influence_factors(model, f.emb, train_id.as_ptr(), test_id.as_ptr(), alpha.as_mut_ptr(), 1, &mut beta);
        assert_eq!(s, FluenceStatus::Ok, "{}", last_error());
        fluence_model_free(model);
    }
    assert!(alpha[0].is_finite() && beta.is_finite());
}

#[test]
fn model_files_round_trip() {
    let f = Fixture::new();
    let model = f.fit();
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(&dir.path().join("m.json"));
    let mut again = ptr::null_mut();
    unsafe {
        assert_eq!(fluence_model_save(model, path.as_ptr()), FluenceStatus::Ok);
        assert_eq!(fluence_model_load(path.as_ptr(), &mut again), FluenceStatus::Ok);
    }
    let test_id = CString::new("test-001").unwrap();
    let (mut a, mut b) = (vec![0.0; 30], vec![0.0; 30]);
    let mut len = 0;
    unsafe {
        fluence_rollout(model, f.test, 0, f.emb, test_id.as_ptr(), a.as_mut_ptr(), 30, &mut len);
        fluence_rollout(again, f.test, 0, f.emb, test_id.as_ptr(), b.as_mut_ptr(), 30, &mut len);
        fluence_model_free(model);
        fluence_model_free(again);
    }
    assert_eq!(a, b);
}

#[test]
fn failures_report_status_and_message() {
    let f = Fixture::new();
    let mut runs = ptr::null_mut();
    let missing = CString::new("/nonexistent/runs.jsonl").unwrap();
    unsafe {
        assert_eq!(fluence_runs_load(missing.as_ptr(), &mut runs), FluenceStatus::Io);
        assert!(runs.is_null());
        assert!(last_error().contains("/nonexistent/runs.jsonl"));
        assert_eq!(fluence_runs_load(ptr::null(), &mut runs), FluenceStatus::NullPointer);
    }

    let model = f.fit();
    let ghost = CString::new("nobody").unwrap();
    let mut buf = [0.0; 30];
    let mut len = 0;
    unsafe {
        let s = fluence_rollout(model, f.test, 0, f.emb, ghost.as_ptr(), buf.as_mut_ptr(), 30, &mut len);
        assert_eq!(s, FluenceStatus::Validation);
        let s = fluence_rollout(model, f.test, 99, f.emb, ghost.as_ptr(), buf.as_mut_ptr(), 30, &mut len);
        assert_eq!(s, FluenceStatus::Validation);
        assert!(last_error().contains("out of range"));
        fluence_model_free(model);
        fluence_runs_free(ptr::null_mut());
    }
}

#[test]
fn metric_entry_points() {
    let (mut mse, mut rho) = (0.0, 0.0);
    let p = [1.0, 2.0, 4.0];
    let t = [1.0, 3.0, 3.0];
    let xs = [1.0, 2.0, 2.0, 3.0];
    let ys = [1.0, 2.0, 3.0, 4.0];
    unsafe {
        assert_eq!(fluence_all_steps_mse(p.as_ptr(), t.as_ptr(), 3, 1, &mut mse), FluenceStatus::Ok);
        assert_eq!(fluence_spearman(xs.as_ptr(), ys.as_ptr(), 4, &mut rho), FluenceStatus::Ok);
    }
    assert_eq!(mse, 1.0);
    assert!((rho - 0.9486832980505138).abs() < 1e-12);

    let flat = [1.0, 1.0];
    let status = unsafe { fluence_spearman(flat.as_ptr(), flat.as_ptr(), 2, &mut rho) };
    assert_ne!(status, FluenceStatus::Ok);
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/fluence.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "fluence_runs_load",
        "fluence_embeddings_load",
        "fluence_model_load",
        "fluence_fit",
        "fluence_rollout",
        "fluence_influence_factors",
        "fluence_all_steps_mse",
        "fluence_spearman",
        "fluence_last_error",
        "typedef struct FluenceModel FluenceModel;",
        "FLUENCE_STATUS_BUFFER_TOO_SMALL = 5",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(out) = std::process::Command::new("cc")
        .args(["-std=c99", "-fsyntax-only", "-x", "c"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
