//! Per-framework configuration: where operators live, how to build, and how
//! to invoke the operator runner.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// File name looked up at a workspace root when no explicit config is given.
pub const CONFIG_FILE_NAME: &str = "kforge-framework.toml";

pub const DEFAULT_BUILD_TIMEOUT_S: f64 = 600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameworkConfig {
    pub name: String,
    pub build: BuildRecipe,
    pub runner: RunnerConfig,
    /// operator name -> source paths relative to the framework root.
    #[serde(default)]
    pub operators: BTreeMap<String, Vec<PathBuf>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildRecipe {
    /// File whose presence marks a recognised build configuration.
    pub marker: PathBuf,
    /// Shell command templates; `{root}` and `{jobs}` are substituted.
    pub full: String,
    pub incremental: String,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_passthrough")]
    pub env_passthrough: Vec<String>,
    /// Build products, excluded from tree hashes.
    #[serde(default)]
    pub output_dirs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunnerConfig {
    /// Runner executable relative to the framework root.
    pub path: PathBuf,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn default_timeout() -> f64 {
    DEFAULT_BUILD_TIMEOUT_S
}

fn default_passthrough() -> Vec<String> {
    ["PATH", "HOME", "LANG", "CC", "CXX", "TMPDIR"]
        .into_iter()
        .map(String::from)
        .collect()
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading framework config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing framework config {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl FrameworkConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn locations(&self, operator: &str) -> Option<&[PathBuf]> {
        self.operators.get(operator).map(Vec::as_slice)
    }
}

impl BuildRecipe {
    pub fn render(template: &str, root: &Path, jobs: usize) -> String {
        template
            .replace("{root}", &root.display().to_string())
            .replace("{jobs}", &jobs.to_string())
    }
}
