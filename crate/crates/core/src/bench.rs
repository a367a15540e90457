//! Latency measurement through a transport.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::build::{build, BuildError, BuildMode};
use crate::scalar::{self, Scalar};
use crate::task::TaskSpec;
use crate::transport::Transport;
use crate::verify::{invoke_runner, VerifyError};
use crate::workspace::Workspace;

pub const DEFAULT_ITERS: u32 = 100;
pub const DEFAULT_WARMUP: u32 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PerfProfile<T> {
    pub samples_us: Vec<T>,
    pub warmup_count: u32,
    pub mean_ms: T,
    pub median_ms: T,
    pub backend: String,
    pub threads: u32,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("device busy: utilization {utilization:.3} after {attempts} attempts")]
    DeviceBusy { utilization: f64, attempts: u32 },
    #[error("malformed perf log at `{line}`: {reason}")]
    MalformedPerfLog { line: String, reason: String },
    #[error("expected {expected} samples, runner reported {got}")]
    SampleCount { expected: u32, got: usize },
    #[error("latency must be positive (baseline {baseline}, generated {generated})")]
    NonPositiveLatency { baseline: f64, generated: f64 },
    #[error(transparent)]
    Runner(#[from] VerifyError),
    #[error("baseline build: {0}")]
    Build(#[from] BuildError),
    #[error("baseline build failed:\n{0}")]
    BaselineBuildFailed(String),
    #[error("baseline cache {path}: {reason}")]
    Cache { path: PathBuf, reason: String },
}

fn malformed(line: &str, reason: impl Into<String>) -> BenchError {
    BenchError::MalformedPerfLog {
        line: line.to_string(),
        reason: reason.into(),
    }
}

/// Parse runner timing output. Iteration records must be numbered
/// contiguously from 0 or 1; unrelated lines are ignored.
pub fn parse_perf_log<T: Scalar>(text: &str) -> Result<PerfProfile<T>, BenchError> {
    let mut samples = Vec::new();
    let mut next: Option<u64> = None;
    let mut backend = None;
    let mut threads = None;
    for raw in text.lines() {
        let line = raw.trim_end_matches('\r');
        if let Some(rest) = line.strip_prefix("iter=") {
            let (k, t) = rest
                .split_once(' ')
                .ok_or_else(|| malformed(line, "expected `iter=<k> time_us=<t>`"))?;
            let k: u64 = k.parse().map_err(|_| malformed(line, "iteration is not an integer"))?;
            let t = t
                .strip_prefix("time_us=")
                .ok_or_else(|| malformed(line, "expected `time_us=`"))?;
            let t: f64 = t.parse().map_err(|_| malformed(line, "time is not a number"))?;
            if !(t.is_finite() && t > 0.0) {
                return Err(malformed(line, "time must be positive"));
            }
            match next {
                None if k <= 1 => {}
                None => return Err(malformed(line, format!("first iteration is {k}"))),
                Some(n) if n == k => {}
                Some(n) => return Err(malformed(line, format!("expected iteration {n}"))),
            }
            next = Some(k + 1);
            samples.push(T::lit(t));
        } else if let Some(name) = line.strip_prefix("backend=") {
            if name.is_empty() {
                return Err(malformed(line, "empty backend"));
            }
            backend = Some(name.to_string());
        } else if let Some(n) = line.strip_prefix("threads=") {
            let n: u32 = n
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| malformed(line, "threads must be a positive integer"))?;
            threads = Some(n);
        }
    }
    if samples.is_empty() {
        return Err(malformed("", "no iteration records"));
    }
    let thousand = T::lit(1000.0);
    Ok(PerfProfile {
        mean_ms: scalar::mean(&samples).expect("non-empty") / thousand,
        median_ms: scalar::median(&samples).expect("non-empty") / thousand,
        samples_us: samples,
        warmup_count: 0,
        backend: backend.unwrap_or_else(|| "unknown".into()),
        threads: threads.unwrap_or(1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatePolicy {
    /// Busy fraction of total capacity that must not be reached.
    pub threshold: f64,
    pub retries: u32,
    pub backoff: Duration,
}

impl Default for GatePolicy {
    fn default() -> Self {
        GatePolicy {
            threshold: 0.10,
            retries: 6,
            backoff: Duration::from_secs(10),
        }
    }
}

/// Outcome of polling the device load.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateOutcome {
    pub open: bool,
    pub attempts: u32,
    pub last_utilization: f64,
}

/// Poll utilization until it drops below the threshold or retries run out.
/// A failed reading counts as busy.
pub fn utilization_gate(
    transport: &dyn Transport,
    policy: &GatePolicy,
    sleep: &mut dyn FnMut(Duration),
) -> GateOutcome {
    let mut last = f64::NAN;
    for attempt in 1..=policy.retries + 1 {
        match transport.utilization() {
            Ok(u) => {
                last = u;
                if u < policy.threshold {
                    return GateOutcome {
                        open: true,
                        attempts: attempt,
                        last_utilization: u,
                    };
                }
                log::info!("device load {u:.3} >= {:.3}, attempt {attempt}", policy.threshold);
            }
            Err(e) => log::warn!("utilization query failed: {e}"),
        }
        if attempt <= policy.retries {
            sleep(policy.backoff);
        }
    }
    GateOutcome {
        open: false,
        attempts: policy.retries + 1,
        last_utilization: last,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub iters: u32,
    pub warmup: u32,
    /// `None` skips the load check.
    pub gate: Option<GatePolicy>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            iters: DEFAULT_ITERS,
            warmup: DEFAULT_WARMUP,
            gate: Some(GatePolicy::default()),
        }
    }
}

/// Time the currently built operator. Holds the endpoint lock for the gate
/// check and the run.
pub fn run_benchmark<T: Scalar>(
    ws: &Workspace,
    task: &TaskSpec,
    transport: &dyn Transport,
    opts: &BenchOptions,
) -> Result<PerfProfile<T>, BenchError> {
    run_benchmark_with(ws, task, transport, opts, &mut std::thread::sleep)
}

pub fn run_benchmark_with<T: Scalar>(
    ws: &Workspace,
    task: &TaskSpec,
    transport: &dyn Transport,
    opts: &BenchOptions,
    sleep: &mut dyn FnMut(Duration),
) -> Result<PerfProfile<T>, BenchError> {
    let iters = opts.iters.max(1);
    let _guard = transport.endpoint_lock().lock().unwrap_or_else(|p| p.into_inner());
    if let Some(policy) = &opts.gate {
        let g = utilization_gate(transport, policy, sleep);
        if !g.open {
            return Err(BenchError::DeviceBusy {
                utilization: g.last_utilization,
                attempts: g.attempts,
            });
        }
    }
    let (out, _) = invoke_runner(ws, task, transport, "bench", iters, opts.warmup, false)?;
    let mut profile: PerfProfile<T> = parse_perf_log(&out.stdout)?;
    if profile.samples_us.len() != iters as usize {
        return Err(BenchError::SampleCount {
            expected: iters,
            got: profile.samples_us.len(),
        });
    }
    profile.warmup_count = opts.warmup;
    Ok(profile)
}

/// `baseline / generated`.
pub fn speedup<T: Scalar>(baseline_ms: T, generated_ms: T) -> Result<T, BenchError> {
    if !(baseline_ms > T::zero() && generated_ms > T::zero()) || !baseline_ms.is_finite() || !generated_ms.is_finite() {
        return Err(BenchError::NonPositiveLatency {
            baseline: baseline_ms.to_f64_lossy(),
            generated: generated_ms.to_f64_lossy(),
        });
    }
    Ok(baseline_ms / generated_ms)
}

/// Measured baselines keyed by transport endpoint and task, persisted as JSON.
#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineCache {
    entries: BTreeMap<String, f64>,
    #[serde(skip)]
    path: Option<PathBuf>,
}

impl BaselineCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let mut cache: BaselineCache = if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| BenchError::Cache {
                path: path.into(),
                reason: e.to_string(),
            })?;
            serde_json::from_str(&text).map_err(|e| BenchError::Cache {
                path: path.into(),
                reason: e.to_string(),
            })?
        } else {
            BaselineCache::default()
        };
        cache.path = Some(path.to_path_buf());
        Ok(cache)
    }

    fn key(endpoint: &str, task_id: &str) -> String {
        format!("{endpoint}/{task_id}")
    }

    pub fn get(&self, endpoint: &str, task_id: &str) -> Option<f64> {
        self.entries.get(&Self::key(endpoint, task_id)).copied()
    }

    pub fn insert(&mut self, endpoint: &str, task_id: &str, ms: f64) -> Result<(), BenchError> {
        self.entries.insert(Self::key(endpoint, task_id), ms);
        if let Some(path) = &self.path {
            let text = serde_json::to_string_pretty(self).expect("cache serializes");
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, text)
                .and_then(|_| fs::rename(&tmp, path))
                .map_err(|e| BenchError::Cache {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
        }
        Ok(())
    }
}

/// Baseline latency for `task`: the task's pinned value, else the cache,
/// else a fresh measurement of the unmodified framework. `remeasure` skips
/// both shortcuts. The workspace must not hold an injection.
pub fn resolve_baseline(
    ws: &Workspace,
    task: &TaskSpec,
    transport: &dyn Transport,
    cache: &mut BaselineCache,
    opts: &BenchOptions,
    remeasure: bool,
) -> Result<f64, BenchError> {
    if !remeasure {
        if let Some(ms) = task.baseline_latency_ms {
            return Ok(ms);
        }
        if let Some(ms) = cache.get(&transport.endpoint_id(), &task.id) {
            return Ok(ms);
        }
    }
    if ws.injected().is_some() {
        return Err(BuildError::WorkspaceDirty(ws.root().to_path_buf()).into());
    }
    // the last build may have been a candidate's
    let b = build(ws, BuildMode::Incremental, ws.config().build.timeout_s)?;
    if !b.success {
        return Err(BenchError::BaselineBuildFailed(b.log_text));
    }
    let profile: PerfProfile<f64> = run_benchmark(ws, task, transport, opts)?;
    cache.insert(&transport.endpoint_id(), &task.id, profile.mean_ms)?;
    Ok(profile.mean_ms)
}
