use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SimulatorConfig, SimulatorParams};
use crate::dynamics::MetricKind;
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    d: usize,
    p: usize,
    n: usize,
    metric: MetricKind,
    config: SimulatorConfig,
    /// One row-major `d x p` matrix per lag (a single one when shared).
    w: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    w_add: Vec<f64>,
    u_add: Vec<f64>,
}

pub fn model_to_json(params: &SimulatorParams) -> String {
    let c = params.config();
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        d: c.embed_dim,
        p: c.proj_dim,
        n: c.order,
        metric: c.metric.clone(),
        config: c.clone(),
        w: (0..params.w_count()).map(|j| params.w(j).to_vec()).collect(),
        u: (0..c.order).map(|j| params.u(j).to_vec()).collect(),
        w_add: params.w_add().to_vec(),
        u_add: params.u_add().to_vec(),
    };
    let mut s = serde_json::to_string(&file).expect("model serialization cannot fail");
    s.push('\n');
    s
}

pub fn model_from_json(text: &str) -> Result<SimulatorParams> {
    #[derive(Deserialize)]
    struct Version {
        format_version: u32,
    }
    let version: Version =
        serde_json::from_str(text).map_err(|e| Error::CorruptModel(e.to_string()))?;
    if version.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::CorruptModel(format!(
            "version mismatch: file has format_version {}, expected {MODEL_FORMAT_VERSION}",
            version.format_version
        )));
    }
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::CorruptModel(e.to_string()))?;
    let c = &file.config;
    if (file.d, file.p, file.n) != (c.embed_dim, c.proj_dim, c.order) || file.metric != c.metric {
        return Err(Error::CorruptModel("header does not match embedded config".into()));
    }
    SimulatorParams::from_parts(file.config, file.w, file.u, file.w_add, file.u_add)
        .map_err(|e| Error::CorruptModel(format!("shape mismatch against header: {e}")))
}

pub fn save_model(params: &SimulatorParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_json(params)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SimulatorParams> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SimulatorParams {
        SimulatorParams::init(SimulatorConfig {
            order: 2,
            embed_dim: 5,
            proj_dim: 3,
            seed: 17,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let p = params();
        let text = model_to_json(&p);
        let back = model_from_json(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(model_to_json(&back), text);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let text = model_to_json(&params());
        let err = model_from_json(&text[..text.len() / 2]).unwrap_err();
        assert!(err.to_string().contains("corrupt model file"), "{err}");
    }

    #[test]
    fn version_and_shape_mismatch() {
        let text = model_to_json(&params());
        let bumped = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
        let err = model_from_json(&bumped).unwrap_err();
        assert!(err.to_string().contains("version mismatch"));
        let wrong_d = text.replacen("\"d\":5", "\"d\":6", 1);
        assert!(model_from_json(&wrong_d).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["w_add"].as_array_mut().unwrap().pop();
        let err = model_from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
    }
}
