use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::PipelineConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    /// A stage failed; the listed artifacts are what was written before it.
    Partial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of one run, sufficient to repeat it: the resolved config carries
/// every stage seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub command: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config_digest: String,
    pub config: PipelineConfig,
    pub root_seed: Option<u64>,
    pub seeds: BTreeMap<String, u64>,
    pub versions: BTreeMap<String, String>,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the canonical JSON form of a resolved config.
pub fn config_digest(config: &PipelineConfig) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

pub fn stage_seeds(config: &PipelineConfig) -> BTreeMap<String, u64> {
    let mut seeds = BTreeMap::new();
    if let Some(km) = &config.kmeans {
        seeds.insert("kmeans".into(), km.seed);
    }
    if let Some(ap) = &config.affinity_propagation {
        seeds.insert("affinity_propagation".into(), ap.params.seed);
        seeds.insert("sampling".into(), ap.sampling.seed);
    }
    if let Some(p) = &config.permutation {
        seeds.insert("permutation".into(), p.seed);
    }
    if let Some(s) = &config.synth {
        seeds.insert("synth".into(), s.seed);
    }
    seeds
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("scd-core".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        (
            "store_format".to_string(),
            crate::embedstore::FORMAT_VERSION.to_string(),
        ),
        ("manifest".to_string(), MANIFEST_VERSION.to_string()),
    ])
}

pub fn read_manifest(out_dir: &Path) -> std::io::Result<Manifest> {
    let text = std::fs::read_to_string(out_dir.join(MANIFEST_FILE))?;
    serde_json::from_str(&text).map_err(std::io::Error::other)
}
