//! One plan-and-execute episode for a single task.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::client::{ClientError, LlmClient};
use super::memory::ReflectiveMemory;
use super::parse::{parse_candidate, parse_plan};
use super::prompts::{
    build_acceleration_prompt, build_correction_prompt, build_initial_prompt, build_refinement_prompt,
    build_repair_prompt, candidate_format_reminder, plan_format_reminder, PromptBank, PromptError,
};
use super::{AgentPlan, HistoryEntry, Outcome, PlanKind, PlanSource};
use crate::bench::PerfProfile;
use crate::diagnostics::DiagnosisDocument;
use crate::graph::GraphDesc;
use crate::metrics::{best_index, EvaluationResult};
use crate::pipeline::{evaluate_candidate, load_reference_graph, CandidateOutcome, PipelineError, PipelineOptions};
use crate::results::{RecordSource, ResultRecord, ResultsError, ResultsFile};
use crate::scalar::Scalar;
use crate::task::TaskSpec;
use crate::transport::Transport;
use crate::workspace::{KernelCandidate, Stage, Workspace};

/// Build-log lines shown to the Debugger when no error could be extracted.
const LOG_TAIL_LINES: usize = 40;

/// Next agent to consult after an evaluated candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    Repair,
    Correction,
    Acceleration,
    Stop,
}

/// Total over evaluation states: infrastructure errors stop the episode,
/// then build failure, wrong output and benchmarked map to the three plans.
/// A verified candidate that was not benchmarked has nothing to accelerate.
pub fn route<T: Scalar>(r: &EvaluationResult<T>) -> Route {
    if r.infra_error.is_some() {
        Route::Stop
    } else if !r.compiled {
        Route::Repair
    } else if !r.correct {
        Route::Correction
    } else if r.stage == Stage::Benchmarked {
        Route::Acceleration
    } else {
        Route::Stop
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxIterations,
    VerifiedWithoutBenchmark,
    InfrastructureError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EpisodeCandidate<T> {
    pub candidate: KernelCandidate,
    pub result: EvaluationResult<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EpisodeResult<T> {
    pub task_id: String,
    pub candidates: Vec<EpisodeCandidate<T>>,
    /// Index of the best candidate; `None` only when there are none.
    pub best: Option<usize>,
    pub history: Vec<HistoryEntry<T>>,
    pub stop_reason: Option<StopReason>,
}

impl<T: Scalar> EpisodeResult<T> {
    pub fn best_candidate(&self) -> Option<&EpisodeCandidate<T>> {
        self.best.map(|i| &self.candidates[i])
    }
}

const MASKED_KEYS: &[&str] = &[
    "t_generated_ms",
    "t_baseline_ms",
    "speedup",
    "latency_ms",
    "mean_ms",
    "median_ms",
    "samples_us",
    "duration_s",
];

/// Pretty JSON with timing-dependent fields nulled, for comparing runs.
pub fn masked_json<T: Scalar>(r: &EpisodeResult<T>) -> String {
    fn mask(v: &mut Value) {
        match v {
            Value::Object(m) => {
                for (k, x) in m.iter_mut() {
                    if MASKED_KEYS.contains(&k.as_str()) {
                        *x = Value::Null;
                    } else {
                        mask(x);
                    }
                }
            }
            Value::Array(a) => a.iter_mut().for_each(mask),
            _ => {}
        }
    }
    let mut v = serde_json::to_value(r).expect("episode serializes");
    mask(&mut v);
    serde_json::to_string_pretty(&v).expect("value serializes")
}

/// Runs one candidate through compile, verify and benchmark.
pub trait Evaluator<T> {
    fn evaluate(&mut self, task: &TaskSpec, cand: &KernelCandidate) -> Result<CandidateOutcome<T>, PipelineError>;
}

/// The real pipeline on one workspace and transport.
pub struct PipelineEvaluator<'a, T> {
    pub ws: &'a mut Workspace,
    pub transport: &'a dyn Transport,
    pub baseline_ms: Option<T>,
    pub opts: PipelineOptions,
}

impl<T: Scalar> Evaluator<T> for PipelineEvaluator<'_, T> {
    fn evaluate(&mut self, task: &TaskSpec, cand: &KernelCandidate) -> Result<CandidateOutcome<T>, PipelineError> {
        evaluate_candidate(self.ws, task, cand, self.transport, self.baseline_ms, &self.opts)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeConfig {
    /// Candidates per episode, the initial one included.
    pub max_iters: u32,
    /// Tag written with every results record.
    pub run_id: String,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            max_iters: 10,
            run_id: "episode".into(),
        }
    }
}

/// Inputs to [`run_episode`] other than the evaluator.
pub struct Episode<'a, T> {
    pub task: &'a TaskSpec,
    pub bank: &'a PromptBank,
    pub reference_src: Option<String>,
    pub client: &'a dyn LlmClient,
    pub memory: &'a mut ReflectiveMemory<T>,
    pub results: Option<&'a ResultsFile>,
    pub config: EpisodeConfig,
}

#[derive(Debug, Error)]
pub enum EpisodeError<T: Scalar> {
    #[error("building initial prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error("model client: {source}")]
    Client {
        #[source]
        source: ClientError,
        partial: Box<EpisodeResult<T>>,
    },
    #[error("pipeline: {source}")]
    Pipeline {
        #[source]
        source: PipelineError,
        partial: Box<EpisodeResult<T>>,
    },
    #[error("recording results: {source}")]
    Results {
        #[source]
        source: ResultsError,
        partial: Box<EpisodeResult<T>>,
    },
}

impl<T: Scalar> EpisodeError<T> {
    /// Whatever the episode produced before failing.
    pub fn partial(&self) -> Option<&EpisodeResult<T>> {
        match self {
            EpisodeError::Prompt(_) => None,
            EpisodeError::Client { partial, .. }
            | EpisodeError::Pipeline { partial, .. }
            | EpisodeError::Results { partial, .. } => Some(partial),
        }
    }
}

enum Step {
    Candidate {
        cand: KernelCandidate,
        source: PlanSource,
        note: Option<String>,
    },
    Unusable {
        source: PlanSource,
        reason: String,
    },
}

/// Run up to `max_iters` iterations. Iteration 0 asks the Coder for a first
/// version; each later one routes on the latest evaluated candidate, asks the
/// matching planner, and has the Coder apply the plan to that candidate.
/// Unusable replies get one re-ask per iteration and otherwise leave a
/// `Failed` iteration without changing the route.
pub fn run_episode<T: Scalar>(
    ep: Episode<'_, T>,
    evaluator: &mut dyn Evaluator<T>,
) -> Result<EpisodeResult<T>, EpisodeError<T>> {
    let Episode {
        task,
        bank,
        reference_src,
        client,
        memory,
        results,
        config,
    } = ep;
    let initial_prompt = build_initial_prompt(task, bank, reference_src.as_deref())?;
    let mut out = EpisodeResult {
        task_id: task.id.clone(),
        candidates: Vec::new(),
        best: None,
        history: Vec::new(),
        stop_reason: None,
    };
    let mut ref_graph: Option<Option<GraphDesc>> = None;
    // index into out.candidates and outcome of the latest evaluated candidate
    let mut last: Option<(usize, CandidateOutcome<T>)> = None;

    macro_rules! bail {
        ($variant:ident, $e:expr) => {{
            out.best = best_index(&results_of(&out));
            return Err(EpisodeError::$variant {
                source: $e,
                partial: Box::new(out),
            });
        }};
    }

    for it in 0..config.max_iters {
        let step = match &last {
            None => ask_candidate(client, task, &initial_prompt, it).map(|r| match r {
                Ok(cand) => Step::Candidate {
                    cand,
                    source: PlanSource::Initial,
                    note: None,
                },
                Err(reason) => Step::Unusable {
                    source: PlanSource::Initial,
                    reason,
                },
            }),
            Some((idx, outcome)) => {
                let r = route(&outcome.result);
                let kind = match r {
                    Route::Repair => PlanKind::Repair,
                    Route::Correction => PlanKind::Correction,
                    Route::Acceleration => PlanKind::Acceleration,
                    Route::Stop => {
                        out.stop_reason = Some(if outcome.result.infra_error.is_some() {
                            StopReason::InfrastructureError
                        } else {
                            StopReason::VerifiedWithoutBenchmark
                        });
                        break;
                    }
                };
                let prev = &out.candidates[*idx].candidate;
                let plan_prompt = match kind {
                    PlanKind::Repair => build_repair_prompt(task, prev, &repair_document(task, outcome)),
                    PlanKind::Correction => {
                        let reference = ref_graph.get_or_insert_with(|| load_reference_graph(&task.reference_graph));
                        build_correction_prompt(
                            task,
                            prev,
                            &outcome.failure_summary(),
                            reference.as_ref(),
                            outcome.target_graph.as_ref(),
                            &outcome.graph_diff,
                        )
                    }
                    PlanKind::Acceleration => {
                        let perf = outcome.perf.clone().unwrap_or_else(|| perf_from_result(&outcome.result));
                        build_acceleration_prompt(task, prev, &perf, &memory.similar(task.category))
                    }
                };
                plan_then_code(client, task, prev, kind, &plan_prompt, &out.history, it)
            }
        };
        let step = match step {
            Ok(s) => s,
            Err(e) => bail!(Client, e),
        };

        let (entry, cand, outcome) = match step {
            Step::Candidate { mut cand, source, note } => {
                let outcome = match evaluator.evaluate(task, &cand) {
                    Ok(o) => o,
                    Err(e) => bail!(Pipeline, e),
                };
                cand.stage = outcome.result.stage;
                let r = &outcome.result;
                let entry = HistoryEntry {
                    task_id: task.id.clone(),
                    category: task.category,
                    iteration: it,
                    plan: source,
                    outcome: Outcome {
                        stage: r.stage,
                        max_abs_diff: r.max_abs_diff,
                        latency_ms: r.t_generated_ms,
                        speedup: r.speedup,
                    },
                    note,
                };
                (entry, cand, Some(outcome))
            }
            Step::Unusable { source, reason } => {
                log::warn!("{} iteration {it}: {reason}", task.id);
                let mut cand = match &last {
                    Some((idx, _)) => out.candidates[*idx].candidate.clone(),
                    None => KernelCandidate {
                        task_id: task.id.clone(),
                        iteration: it,
                        files: Default::default(),
                        stage: Stage::Failed,
                    },
                };
                cand.iteration = it;
                cand.stage = Stage::Failed;
                let entry = HistoryEntry {
                    task_id: task.id.clone(),
                    category: task.category,
                    iteration: it,
                    plan: source,
                    outcome: Outcome {
                        stage: Stage::Failed,
                        max_abs_diff: None,
                        latency_ms: None,
                        speedup: None,
                    },
                    note: Some(format!("unusable reply: {reason}")),
                };
                (entry, cand, None)
            }
        };

        let result = match &outcome {
            Some(o) => o.result.clone(),
            None => {
                let mut r = EvaluationResult::new(&task.id, task.category, it);
                r.stage = Stage::Failed;
                r
            }
        };
        if let Some(file) = results {
            let rec = ResultRecord {
                source: RecordSource::Agent,
                run_id: config.run_id.clone(),
                result: result.clone(),
                detail: Some(json!({
                    "plan": &entry.plan,
                    "note": &entry.note,
                    "stage_log": outcome.as_ref().map(|o| &o.stage_log),
                })),
            };
            if let Err(e) = file.append(&rec) {
                bail!(Results, e);
            }
        }
        if let Err(e) = memory.record(entry.clone()) {
            bail!(Results, e);
        }
        out.history.push(entry);
        out.candidates.push(EpisodeCandidate { candidate: cand, result });
        if let Some(o) = outcome {
            last = Some((out.candidates.len() - 1, o));
        }
    }
    out.stop_reason.get_or_insert(StopReason::MaxIterations);
    out.best = best_index(&results_of(&out));
    Ok(out)
}

fn results_of<T: Scalar>(out: &EpisodeResult<T>) -> Vec<EvaluationResult<T>> {
    out.candidates.iter().map(|c| c.result.clone()).collect()
}

/// Diagnosis for the repair prompt, falling back to the build log tail when
/// nothing was extracted.
fn repair_document<T: Scalar>(task: &TaskSpec, outcome: &CandidateOutcome<T>) -> DiagnosisDocument {
    let mut doc = outcome.diagnosis.clone().unwrap_or_else(|| DiagnosisDocument {
        opname: task.operator_name.clone(),
        local_error: Default::default(),
        crossfile_error: Default::default(),
        other_error: String::new(),
    });
    if doc.is_empty() {
        if let Some(b) = &outcome.build {
            let lines: Vec<&str> = b.log_text.lines().collect();
            doc.other_error = lines[lines.len().saturating_sub(LOG_TAIL_LINES)..].join("\n");
        }
    }
    doc
}

fn perf_from_result<T: Scalar>(r: &EvaluationResult<T>) -> PerfProfile<T> {
    let mean = r.t_generated_ms.unwrap_or_default();
    PerfProfile {
        samples_us: Vec::new(),
        warmup_count: 0,
        mean_ms: mean,
        median_ms: mean,
        backend: "unknown".into(),
        threads: 1,
    }
}

/// Coder call with one re-ask. The inner error explains an unusable reply.
fn ask_candidate(
    client: &dyn LlmClient,
    task: &TaskSpec,
    prompt: &str,
    it: u32,
) -> Result<Result<KernelCandidate, String>, ClientError> {
    let reply = client.complete(prompt)?;
    match parse_candidate(&reply, task, it) {
        Ok(c) => Ok(Ok(c)),
        Err(e) => {
            log::info!("{} iteration {it}: re-asking coder: {e}", task.id);
            let retry = format!("{prompt}{}", candidate_format_reminder(task, &e.to_string()));
            let reply = client.complete(&retry)?;
            Ok(parse_candidate(&reply, task, it).map_err(|e| e.to_string()))
        }
    }
}

fn ask_plan(
    client: &dyn LlmClient,
    task: &TaskSpec,
    prompt: &str,
    kind: PlanKind,
    it: u32,
) -> Result<Result<AgentPlan, String>, ClientError> {
    let reply = client.complete(prompt)?;
    match parse_plan(&reply, kind) {
        Ok(p) => Ok(Ok(p)),
        Err(e) => {
            log::info!("{} iteration {it}: re-asking planner: {e}", task.id);
            let retry = format!("{prompt}{}", plan_format_reminder(kind, &e.to_string()));
            let reply = client.complete(&retry)?;
            Ok(parse_plan(&reply, kind).map_err(|e| e.to_string()))
        }
    }
}

fn plan_then_code<T: Scalar>(
    client: &dyn LlmClient,
    task: &TaskSpec,
    prev: &KernelCandidate,
    kind: PlanKind,
    plan_prompt: &str,
    history: &[HistoryEntry<T>],
    it: u32,
) -> Result<Step, ClientError> {
    let plan = match ask_plan(client, task, plan_prompt, kind, it)? {
        Ok(p) => p,
        Err(reason) => {
            return Ok(Step::Unusable {
                source: PlanSource::InvalidPlan { kind },
                reason,
            })
        }
    };
    let repeated = matches!(
        history.last(),
        Some(HistoryEntry { plan: PlanSource::Plan { plan: p }, .. }) if *p == plan
    );
    let note = if repeated {
        log::warn!("{} iteration {it}: plan repeats the previous iteration's; adding history", task.id);
        Some("repeated previous plan".to_string())
    } else {
        None
    };
    let prompt = build_refinement_prompt(task, prev, &plan, repeated.then_some(history));
    let source = PlanSource::Plan { plan };
    Ok(match ask_candidate(client, task, &prompt, it)? {
        Ok(cand) => Step::Candidate { cand, source, note },
        Err(reason) => Step::Unusable { source, reason },
    })
}
