use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const COMPLETE_FILE: &str = "run_complete.json";

/// What a run was started with. Written once, before the first step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub label: String,
    /// Every config key with its resolved value.
    pub config: BTreeMap<String, String>,
    pub config_digest: String,
    pub train_seed: u64,
    pub target_seed: u64,
    pub target_indices: Vec<usize>,
    /// Dataset role (`source`, `target`, `eval`) to content digest.
    pub dataset_digests: BTreeMap<String, String>,
    pub started_at: String,
}

/// Written when a run ends, since the manifest itself is never rewritten.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunComplete {
    pub started_at: String,
    pub finished_at: String,
    pub batches_done: u64,
    pub mean_accuracy: f64,
    pub overall_accuracy: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n")
}

/// Fails if `path` exists, so a manifest is never overwritten.
pub fn write_new_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).expect("serializable");
    let mut f = fs::OpenOptions::new().write(true).create_new(true).open(path)?;
    f.write_all(text.as_bytes())?;
    f.write_all(b"\n")
}
