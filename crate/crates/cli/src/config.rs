//! TOML run configuration: a `[model]` table deserializing into the model
//! shape and a `[train]` table deserializing into the stage settings, both
//! validated on load.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;
use turnforge_core::model::ModelConfig;
use turnforge_core::training::TrainConfig;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Loads and validates a config file, returning it with the raw text so
/// runs can snapshot exactly what they executed.
pub fn load_config(path: &Path) -> Result<(FileConfig, String)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("read config {}", path.display()))?;
    let cfg: FileConfig = toml::from_str(&text)
        .with_context(|| format!("parse config {}", path.display()))?;
    cfg.model
        .validate()
        .with_context(|| format!("invalid [model] in {}", path.display()))?;
    cfg.train
        .validate()
        .with_context(|| format!("invalid [train] in {}", path.display()))?;
    Ok((cfg, text))
}
