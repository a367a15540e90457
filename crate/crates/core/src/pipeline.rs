//! The four evaluation stages for one candidate: inject and build, verify,
//! benchmark, then restore.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{run_benchmark, BenchOptions, PerfProfile};
use crate::build::{build, BuildMode, BuildResult};
use crate::diagnostics::{attach_context, extract_errors, group_errors, DiagnosisDocument, MAX_RECORDS};
use crate::graph::{diff_graphs, parse_graph, GraphDesc, GraphMismatch};
use crate::metrics::EvaluationResult;
use crate::scalar::Scalar;
use crate::task::TaskSpec;
use crate::transport::Transport;
use crate::verify::{inspect_graph, run_verification, VerifyError, VerifyOptions, VerifyResult};
use crate::workspace::{KernelCandidate, Stage, Workspace, WorkspaceError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub verify: VerifyOptions,
    /// `None` stops after verification.
    pub bench: Option<BenchOptions>,
    /// Overrides the framework's build timeout.
    pub build_timeout_s: Option<f64>,
    /// Run the runner's inspector after a failed verification.
    pub inspect_on_mismatch: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            verify: VerifyOptions::default(),
            bench: Some(BenchOptions::default()),
            build_timeout_s: None,
            inspect_on_mismatch: true,
        }
    }
}

/// Everything learned about one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CandidateOutcome<T> {
    pub result: EvaluationResult<T>,
    pub build: Option<BuildResult>,
    pub diagnosis: Option<DiagnosisDocument>,
    pub verify: Option<VerifyResult<T>>,
    /// Runner crash or missing output during verification.
    pub exec_error: Option<String>,
    pub target_graph: Option<GraphDesc>,
    pub graph_diff: Vec<GraphMismatch>,
    pub perf: Option<PerfProfile<T>>,
    /// One line per stage reached, for logs.
    pub stage_log: Vec<String>,
}

impl<T: Scalar> CandidateOutcome<T> {
    pub fn exit_code(&self) -> i32 {
        self.result.exit_code()
    }

    /// Text describing why verification failed, for correction prompts.
    pub fn failure_summary(&self) -> String {
        if let Some(e) = &self.exec_error {
            return e.clone();
        }
        match &self.verify {
            Some(v) if !v.passed => {
                let mut s = format!(
                    "output mismatch: max_abs_diff {} exceeds tolerance {} at {} element(s)",
                    v.max_abs_diff, v.tolerance, v.mismatch_count
                );
                if let (Some(o), Some(i)) = (v.first_mismatch_output, v.first_mismatch_index) {
                    s.push_str(&format!("; first at output {o}, index {i}"));
                }
                if let Some(n) = &v.note {
                    s.push_str(&format!(" ({n})"));
                }
                s
            }
            _ => String::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("restoring workspace {root}: {source}")]
    Restore {
        root: std::path::PathBuf,
        #[source]
        source: WorkspaceError,
    },
    #[error("cloning workspace: {0}")]
    Clone(#[source] WorkspaceError),
}

/// Run inject, build, verify and benchmark, stopping at the first failure.
/// The workspace is restored before returning whenever injection happened;
/// only a failed restore is an `Err`.
pub fn evaluate_candidate<T: Scalar>(
    ws: &mut Workspace,
    task: &TaskSpec,
    candidate: &KernelCandidate,
    transport: &dyn Transport,
    baseline_ms: Option<T>,
    opts: &PipelineOptions,
) -> Result<CandidateOutcome<T>, PipelineError> {
    let mut out = CandidateOutcome {
        result: EvaluationResult::new(&task.id, task.category, candidate.iteration),
        build: None,
        diagnosis: None,
        verify: None,
        exec_error: None,
        target_graph: None,
        graph_diff: Vec::new(),
        perf: None,
        stage_log: Vec::new(),
    };
    if let Err(e) = ws.inject(task, candidate) {
        out.result.stage = Stage::Failed;
        out.result.infra_error = Some(format!("inject: {e}"));
        return Ok(out);
    }
    out.stage_log.push(format!("register: injected {} file(s)", candidate.files.len()));
    run_stages(ws, task, candidate, transport, baseline_ms, opts, &mut out);
    ws.restore().map_err(|source| PipelineError::Restore {
        root: ws.root().to_path_buf(),
        source,
    })?;
    out.stage_log.push("restore: workspace restored".into());
    Ok(out)
}

fn run_stages<T: Scalar>(
    ws: &Workspace,
    task: &TaskSpec,
    candidate: &KernelCandidate,
    transport: &dyn Transport,
    baseline_ms: Option<T>,
    opts: &PipelineOptions,
    out: &mut CandidateOutcome<T>,
) {
    let timeout = opts.build_timeout_s.unwrap_or(ws.config().build.timeout_s);
    let b = match build(ws, BuildMode::Incremental, timeout) {
        Ok(b) => b,
        Err(e) => {
            out.result.stage = Stage::Failed;
            out.result.infra_error = Some(format!("build: {e}"));
            return;
        }
    };
    out.stage_log.push(format!(
        "compile: {} in {:.2} s",
        if b.success { "ok" } else { "failed" },
        b.duration_s
    ));
    if !b.success {
        let names: Vec<&str> = candidate.files.keys().map(String::as_str).collect();
        let ex = extract_errors(&b.log_text, &names);
        let mut records = ex.records;
        records.truncate(MAX_RECORDS);
        attach_context(&mut records, ws.root());
        out.diagnosis = Some(group_errors(&task.operator_name, &records, &ex.other_errors));
        out.result.errors = records;
        out.result.stage = Stage::Failed;
        out.build = Some(b);
        return;
    }
    out.build = Some(b);
    out.result.compiled = true;
    out.result.stage = Stage::Compiled;

    match run_verification::<T>(ws, task, transport, &opts.verify) {
        Ok(v) => {
            out.stage_log.push(format!(
                "verify: {} (max_abs_diff {})",
                if v.passed { "passed" } else { "failed" },
                v.max_abs_diff
            ));
            out.result.max_abs_diff = Some(v.max_abs_diff);
            out.result.correct = v.passed;
            let passed = v.passed;
            out.verify = Some(v);
            if !passed {
                inspect(ws, task, transport, opts, out);
                return;
            }
        }
        Err(e @ (VerifyError::ExecutionFailure { .. } | VerifyError::OutputMissing { .. } | VerifyError::Tensor(_))) => {
            out.stage_log.push(format!("verify: {e}"));
            out.exec_error = Some(e.to_string());
            inspect(ws, task, transport, opts, out);
            return;
        }
        Err(e) => {
            out.result.infra_error = Some(format!("verify: {e}"));
            return;
        }
    }
    out.result.stage = Stage::Verified;

    let Some(bench_opts) = &opts.bench else {
        return;
    };
    match run_benchmark::<T>(ws, task, transport, bench_opts) {
        Ok(p) => {
            out.stage_log.push(format!(
                "benchmark: mean {} ms over {} iterations",
                p.mean_ms,
                p.samples_us.len()
            ));
            let r = &mut out.result;
            r.t_generated_ms = Some(p.mean_ms);
            if let Some(b) = baseline_ms {
                r.t_baseline_ms = Some(b);
                match crate::bench::speedup(b, p.mean_ms) {
                    Ok(s) => r.speedup = Some(s),
                    Err(e) => r.infra_error = Some(format!("speedup: {e}")),
                }
            }
            r.stage = Stage::Benchmarked;
            out.perf = Some(p);
        }
        Err(e) => {
            out.stage_log.push(format!("benchmark: {e}"));
            out.result.infra_error = Some(format!("benchmark: {e}"));
        }
    }
}

fn inspect<T: Scalar>(
    ws: &Workspace,
    task: &TaskSpec,
    transport: &dyn Transport,
    opts: &PipelineOptions,
    out: &mut CandidateOutcome<T>,
) {
    if !opts.inspect_on_mismatch {
        return;
    }
    let target = match inspect_graph(ws, task, transport) {
        Ok(g) => g,
        Err(e) => {
            log::debug!("inspect failed for {}: {e}", task.id);
            return;
        }
    };
    if let Some(reference) = load_reference_graph(&task.reference_graph) {
        out.graph_diff = diff_graphs(&reference, &target);
    }
    out.target_graph = Some(target);
}

pub fn load_reference_graph(path: &Path) -> Option<GraphDesc> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| log::warn!("reading {}: {e}", path.display()))
        .ok()?;
    parse_graph(&text)
        .map_err(|e| log::warn!("{}: {e}", path.display()))
        .ok()
}

/// Evaluate candidates concurrently, each on its own clone of `base`, with
/// at most `jobs` in flight. Results come back in input order; clones are
/// removed afterwards.
pub fn evaluate_group<T: Scalar>(
    base: &Workspace,
    task: &TaskSpec,
    candidates: &[KernelCandidate],
    transport: &dyn Transport,
    baseline_ms: Option<T>,
    opts: &PipelineOptions,
    jobs: usize,
) -> Result<Vec<Result<CandidateOutcome<T>, PipelineError>>, PipelineError> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let workers = jobs.max(1).min(candidates.len());
    let mut clones = Vec::with_capacity(workers);
    for i in 0..workers {
        match base.clone_workspace(&format!("{}-job{i}", base.label())) {
            Ok(ws) => clones.push(ws),
            Err(e) => {
                remove_clones(&clones);
                return Err(PipelineError::Clone(e));
            }
        }
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<CandidateOutcome<T>, PipelineError>>>> =
        candidates.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for ws in clones.iter_mut() {
            let (next, slots) = (&next, &slots);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= candidates.len() {
                    break;
                }
                let r = evaluate_candidate(ws, task, &candidates[i], transport, baseline_ms, opts);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    remove_clones(&clones);
    Ok(slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect())
}

fn remove_clones(clones: &[Workspace]) {
    for ws in clones {
        if let Err(e) = std::fs::remove_dir_all(ws.root()) {
            log::warn!("removing clone {}: {e}", ws.root().display());
        }
    }
}
