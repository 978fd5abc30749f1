use std::path::{Path, PathBuf};

use epiqc_api::ApiConfig;
use epiqc_core::gate::GateConfig;
use epiqc_core::ingest::parse_source_registry;
use epiqc_core::reconciler::ReconcileConfig;
use epiqc_core::region::RegionTree;
use epiqc_core::{Engine, EngineConfig, Store};
use serde::Deserialize;
use thiserror::Error;

use crate::resolve_path;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    regions: PathBuf,
    sources: PathBuf,
    store: PathBuf,
    #[serde(default = "default_timeout")]
    fetch_timeout_secs: u64,
    #[serde(default)]
    gate: GateConfig,
    #[serde(default)]
    reconcile: ReconcileConfig,
    #[serde(default)]
    api: ApiConfig,
}

fn default_timeout() -> u64 {
    30
}

/// Parsed configuration with every path resolved against the config file's directory.
#[derive(Debug, Clone)]
pub struct CliConfig {
    pub base_dir: PathBuf,
    pub regions: PathBuf,
    pub sources: PathBuf,
    pub store: PathBuf,
    pub fetch_timeout_secs: u64,
    pub engine: EngineConfig,
    pub api: ApiConfig,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let invalid = |message: String| ConfigError::Invalid {
            path: path.to_path_buf(),
            message,
        };
        let raw: RawConfig = toml::from_str(&text).map_err(|e| invalid(e.to_string()))?;
        raw.gate.validate().map_err(|e| invalid(e.to_string()))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let config = Self {
            regions: resolve_path(&base_dir, &raw.regions),
            sources: resolve_path(&base_dir, &raw.sources),
            store: resolve_path(&base_dir, &raw.store),
            base_dir,
            fetch_timeout_secs: raw.fetch_timeout_secs,
            engine: EngineConfig {
                gate: raw.gate,
                reconcile: raw.reconcile,
            },
            api: raw.api,
        };
        for file in [&config.regions, &config.sources] {
            if !file.is_file() {
                return Err(invalid(format!("referenced file {} does not exist", file.display())));
            }
        }
        Ok(config)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        resolve_path(&self.base_dir, path)
    }

    /// Loads the registries and opens (or starts) the store in `store_dir`.
    pub fn open_engine(&self, store_dir: &Path) -> Result<Engine, crate::CliError> {
        let invalid = |path: &Path, message: String| ConfigError::Invalid {
            path: path.to_path_buf(),
            message,
        };
        let read = |path: &Path| {
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                path: path.to_path_buf(),
                source,
            })
        };
        let mut regions = RegionTree::new();
        regions
            .load_csv(read(&self.regions)?.as_bytes())
            .map_err(|e| invalid(&self.regions, e.to_string()))?;
        let sources = parse_source_registry(&read(&self.sources)?).map_err(|e| invalid(&self.sources, e.to_string()))?;
        for s in &sources {
            if !regions.contains(&s.scope_region) {
                return Err(invalid(&self.sources, format!("source `{}` scopes unknown region `{}`", s.source_id, s.scope_region)).into());
            }
        }
        Ok(Engine::open(store_dir, Store::new(regions), sources, self.engine.clone())?)
    }
}
