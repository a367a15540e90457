//! Drives a framework's build recipe and captures its output verbatim.

use std::path::PathBuf;
use std::process::Command;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::framework::BuildRecipe;
use crate::process::run_captured;
use crate::workspace::Workspace;

/// Marker prefix for lines the harness appends to a build log.
pub const LOG_MARKER: &str = "[kforge]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BuildMode {
    Full,
    Incremental,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildResult {
    pub success: bool,
    pub log_text: String,
    pub duration_s: f64,
    pub incremental: bool,
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("no build configuration ({marker}) under {root}")]
    BuildSystemMissing { root: PathBuf, marker: PathBuf },
    #[error("workspace {0} has an active injection; base builds need a clean tree")]
    WorkspaceDirty(PathBuf),
    #[error("timeout must be positive, got {0}")]
    InvalidTimeout(f64),
    #[error("spawning build shell: {0}")]
    Spawn(#[source] std::io::Error),
}

/// Run the configured recipe for `mode` under a wall-clock limit. A failing
/// or timed-out build is an `Ok` result with `success == false`.
pub fn build(ws: &Workspace, mode: BuildMode, timeout_s: f64) -> Result<BuildResult, BuildError> {
    if !(timeout_s.is_finite() && timeout_s > 0.0) {
        return Err(BuildError::InvalidTimeout(timeout_s));
    }
    let recipe = &ws.config().build;
    if !ws.root().join(&recipe.marker).exists() {
        return Err(BuildError::BuildSystemMissing {
            root: ws.root().to_path_buf(),
            marker: recipe.marker.clone(),
        });
    }
    let template = match mode {
        BuildMode::Full => &recipe.full,
        BuildMode::Incremental => &recipe.incremental,
    };
    let command = BuildRecipe::render(template, ws.root(), recipe.jobs.max(1));
    log::debug!("build ({mode:?}) in {}: {command}", ws.root().display());

    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(format!("exec 2>&1\n{command}"))
        .current_dir(ws.root())
        .env_clear();
    for key in &recipe.env_passthrough {
        if let Some(v) = std::env::var_os(key) {
            cmd.env(key, v);
        }
    }

    let captured = run_captured(&mut cmd, Duration::from_secs_f64(timeout_s)).map_err(BuildError::Spawn)?;
    let duration_s = captured.elapsed.as_secs_f64();
    let status = captured.status;
    let mut log_text = captured.stdout;
    log_text.push_str(&captured.stderr);

    let success = match status {
        Some(s) if s.success() => true,
        Some(s) => {
            push_marker(&mut log_text, &format!("build command failed with {s}"));
            false
        }
        None => {
            push_marker(&mut log_text, &format!("build timed out after {timeout_s:.1} s"));
            false
        }
    };
    Ok(BuildResult {
        success,
        log_text,
        duration_s,
        incremental: mode == BuildMode::Incremental,
    })
}

/// Full build of a clean tree so later candidate builds can be incremental.
pub fn precompile_base(ws: &Workspace) -> Result<BuildResult, BuildError> {
    if ws.injected().is_some() {
        return Err(BuildError::WorkspaceDirty(ws.root().to_path_buf()));
    }
    build(ws, BuildMode::Full, ws.config().build.timeout_s)
}

fn push_marker(log: &mut String, msg: &str) {
    if !log.is_empty() && !log.ends_with('\n') {
        log.push('\n');
    }
    log.push_str(LOG_MARKER);
    log.push(' ');
    log.push_str(msg);
    log.push('\n');
}
