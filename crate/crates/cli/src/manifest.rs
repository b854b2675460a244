use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tsap_core::pipeline::ExperimentConfig;

use crate::error::StageContext;
use crate::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Digest of everything the stage read: config plus upstream artifacts.
    pub inputs_sha256: String,
    pub artifacts: Vec<Artifact>,
    pub wall_clock_s: f64,
}

impl StageRecord {
    /// True when every artifact is still on disk with its recorded checksum.
    pub fn intact(&self, run_dir: &Path) -> bool {
        self.artifacts
            .iter()
            .all(|a| sha256_file(&run_dir.join(&a.path)).is_ok_and(|h| h == a.sha256))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub master_seed: u64,
    pub config: ExperimentConfig,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: config.seed,
            config: config.clone(),
            stages: BTreeMap::new(),
        }
    }

    /// Every artifact of every stage, in stage order.
    pub fn inventory(&self) -> Vec<&Artifact> {
        self.stages.values().flat_map(|s| &s.artifacts).collect()
    }

    pub fn load(run_dir: &Path) -> Result<Option<Self>> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).stage("manifest")?;
        serde_json::from_str(&text).map(Some).stage("manifest")
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        // write-then-rename so an interrupted save never leaves a torn manifest
        let tmp = run_dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, text).stage("manifest")?;
        fs::rename(&tmp, run_dir.join(MANIFEST_FILE)).stage("manifest")
    }
}
