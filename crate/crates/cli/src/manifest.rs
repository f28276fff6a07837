//! Per-run provenance manifests.
//!
//! Every command that owns an output directory writes `manifest.json` there
//! before doing real work (`ok: false`) and rewrites it on success with
//! outputs and a finish timestamp. A directory that already holds a manifest
//! is refused: one run directory belongs to exactly one invocation.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use chrono::Utc;
use serde::Serialize;
use turnforge_core::model::CHECKPOINT_VERSION;
use turnforge_core::objectives::shard::SHARD_HEADER;

/// Lineage pointer to the checkpoint a run started from.
#[derive(Debug, Serialize)]
pub struct CheckpointRef {
    pub path: String,
    pub step: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Input name -> path.
    pub inputs: BTreeMap<String, String>,
    /// Paths written by this run, relative to the run directory.
    pub outputs: Vec<String>,
    /// Free-form run facts (counts, final losses, flags), all stringified.
    pub details: BTreeMap<String, String>,
    pub shard_format: String,
    pub checkpoint_format: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<CheckpointRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resumed_from: Option<String>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub ok: bool,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            details: BTreeMap::new(),
            shard_format: SHARD_HEADER.to_string(),
            checkpoint_format: CHECKPOINT_VERSION.to_string(),
            init_checkpoint: None,
            resumed_from: None,
            started_at: Utc::now().to_rfc3339(),
            finished_at: None,
            ok: false,
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.display().to_string());
    }

    pub fn detail(&mut self, key: &str, value: impl ToString) {
        self.details.insert(key.to_string(), value.to_string());
    }

    /// Serializes the manifest into `dir/manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self).context("serialize manifest")?;
        std::fs::write(&path, json)
            .with_context(|| format!("write {}", path.display()))?;
        Ok(())
    }

    /// Records the outputs, stamps the finish time, flips `ok`, and
    /// rewrites the manifest.
    pub fn finalize(mut self, dir: &Path, outputs: Vec<String>) -> Result<()> {
        self.outputs = outputs;
        self.finished_at = Some(Utc::now().to_rfc3339());
        self.ok = true;
        self.write(dir)
    }
}

/// Creates the run directory, refusing one that already belongs to a run.
pub fn create_run_dir(dir: &Path) -> Result<()> {
    if dir.join("manifest.json").exists() {
        bail!(
            "{} already holds a manifest; run directories are never reused",
            dir.display()
        );
    }
    std::fs::create_dir_all(dir)
        .with_context(|| format!("create run directory {}", dir.display()))?;
    Ok(())
}
