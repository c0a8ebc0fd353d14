use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gpda_core::datagen::{DatasetSpec, Provenance};
use gpda_core::TrainConfig;
use serde::Serialize;

use crate::failure::{io, CmdResult, Failure, CHECK};

pub const FILE: &str = "manifest.toml";

/// Structured record of one command run. Parses back as a config file.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    pub duration_s: f64,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    pub provenance: Provenance,
    pub outputs: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    pub fn new(command: &'static str, train: TrainConfig, dataset: DatasetSpec, provenance: Provenance) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: train.seed,
            method: None,
            methods: None,
            seeds: None,
            lambda_grid: None,
            alpha_grid: None,
            checkpoint: None,
            split: None,
            duration_s: 0.0,
            train,
            dataset,
            provenance,
            outputs: BTreeMap::new(),
        }
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.into(), path.to_path_buf());
    }

    /// Stamps the elapsed time and writes `manifest.toml` into `dir` via a
    /// temporary file and a rename.
    pub fn finish(mut self, dir: &Path, started: Instant) -> CmdResult<PathBuf> {
        self.duration_s = started.elapsed().as_secs_f64();
        let path = dir.join(FILE);
        self.output("manifest", &path);
        let text = toml::to_string(&self).map_err(|e| Failure::new(CHECK, e))?;
        let tmp = dir.join(format!(".{FILE}.partial"));
        std::fs::write(&tmp, text).map_err(io(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(io(&path))?;
        Ok(path)
    }
}
