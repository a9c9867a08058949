use std::path::{Path, PathBuf};

use selfablate::container::sha256_hex;
use selfablate::train::config::RunConfig;
use selfablate::{Error, Result};
use serde::Serialize;

#[derive(Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputFile {
    pub fn hash(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Serialize)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
}

/// Everything needed to reproduce a training run, written before it starts.
#[derive(Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub corpus: InputFile,
    pub resume: Option<InputFile>,
    pub metrics: PathBuf,
    pub final_checkpoint: PathBuf,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
