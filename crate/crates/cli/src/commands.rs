use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use kforge_core::agents::{
    run_episode, Episode, EpisodeConfig, HttpClient, LlmClient, PipelineEvaluator, PromptBank, ReflectiveMemory,
    ScriptedClient, StopReason,
};
use kforge_core::bench::{resolve_baseline, run_benchmark, BaselineCache};
use kforge_core::build::{build, BuildMode};
use kforge_core::graph::parse_graph;
use kforge_core::metrics::{best_per_task, compute_metrics, emit_report, grpo_reward, render_table};
use kforge_core::pipeline::{evaluate_candidate, evaluate_group, CandidateOutcome};
use kforge_core::results::{RecordSource, ResultRecord, ResultsFile};
use kforge_core::task::{category_histogram, load_manifest};
use kforge_core::transport::Transport;
use kforge_core::{EpisodeResult, KernelCandidate, PerfProfile, TaskSpec, Tensor, Workspace};
use serde_json::json;

use crate::config::RunConfig;
use crate::{Command, RunArgs, TargetArgs, WorkspaceAction, EXIT_INFRA};

pub fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Validate { manifest, framework } => validate(&manifest, framework.as_deref()),
        Command::Eval { target, run, candidates } => eval(&target, &run, &candidates),
        Command::Agent {
            target,
            run,
            bank,
            transcript,
            memory,
            summary,
        } => agent(&target, &run, &bank, transcript.as_deref(), memory.as_deref(), summary.as_deref()),
        Command::Bench { target, run } => bench(&target, &run),
        Command::Report { results, thresholds, out } => report(&results, &thresholds, out.as_deref()),
        Command::Reward {
            results,
            compiled,
            correct,
            baseline_ms,
            generated_ms,
            shaped,
        } => match results {
            Some(path) => reward_file(&path, shaped),
            None => {
                let r = grpo_reward(compiled, correct, baseline_ms, generated_ms, shaped)?;
                println!("{r}");
                Ok(0)
            }
        },
        Command::Workspace { action } => workspace(action),
    }
}

fn validate(manifest: &Path, framework: Option<&Path>) -> Result<u8> {
    let m = load_manifest(manifest)?;
    let ws = framework.map(Workspace::open).transpose()?;
    let mut problems = Vec::new();
    for task in &m.tasks {
        let graph = fs::read_to_string(&task.reference_graph)
            .map_err(anyhow::Error::from)
            .and_then(|t| Ok(parse_graph(&t)?));
        if let Err(e) = graph {
            problems.push(format!("{}: reference graph: {e}", task.id));
        }
        for p in task.reference_inputs.iter().chain(&task.reference_outputs) {
            if let Err(e) = Tensor::read(p) {
                problems.push(format!("{}: {}: {e}", task.id, p.display()));
            }
        }
        if let Some(ws) = &ws {
            if let Err(e) = ws.target_paths(task) {
                problems.push(format!("{}: {e}", task.id));
            }
        }
    }
    for p in &problems {
        eprintln!("{p}");
    }
    println!("{} task(s)", m.len());
    for (cat, n) in category_histogram(&m) {
        println!("  {:<14} {n}", cat.as_str());
    }
    if problems.is_empty() {
        Ok(0)
    } else {
        eprintln!("{} problem(s) found", problems.len());
        Ok(EXIT_INFRA)
    }
}

struct Target {
    task: TaskSpec,
    ws: Workspace,
    config: RunConfig,
    transport: Box<dyn Transport>,
}

fn open_target(target: &TargetArgs, run: &RunArgs) -> Result<Target> {
    let config = run.config();
    config.validate()?;
    let manifest = load_manifest(&target.manifest)?;
    let task = manifest
        .task(&target.task)
        .with_context(|| format!("task '{}' is not in {}", target.task, target.manifest.display()))?
        .clone();
    let ws = Workspace::open(&target.framework)?;
    if let Some(inj) = ws.injected() {
        bail!(
            "{} still holds an injected candidate for task '{}'; run `kforge workspace restore` first",
            ws.root().display(),
            inj.task_id
        );
    }
    let transport = config.open_transport()?;
    Ok(Target {
        task,
        ws,
        config,
        transport,
    })
}

fn baseline_cache(run: &RunArgs) -> Result<BaselineCache> {
    Ok(match &run.baseline_cache {
        Some(p) => BaselineCache::load(p)?,
        None => BaselineCache::in_memory(),
    })
}

/// Baseline for speedups; `None` when benchmarking is off.
fn baseline(t: &Target, run: &RunArgs) -> Result<Option<f64>> {
    if !t.config.bench {
        return Ok(None);
    }
    let mut cache = baseline_cache(run)?;
    let ms = resolve_baseline(
        &t.ws,
        &t.task,
        &*t.transport,
        &mut cache,
        &t.config.bench_options(),
        run.remeasure_baseline,
    )?;
    log::info!("baseline for {}: {ms} ms", t.task.id);
    Ok(Some(ms))
}

fn run_id(run: &RunArgs, prefix: &str) -> String {
    run.run_id.clone().unwrap_or_else(|| {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        format!("{prefix}-{secs}")
    })
}

fn code(c: i32) -> u8 {
    u8::try_from(c).unwrap_or(EXIT_INFRA)
}

fn eval(target: &TargetArgs, run: &RunArgs, dirs: &[PathBuf]) -> Result<u8> {
    let mut t = open_target(target, run)?;
    let candidates = dirs
        .iter()
        .enumerate()
        .map(|(i, d)| KernelCandidate::from_dir(&t.task, i as u32, d))
        .collect::<Result<Vec<_>, _>>()?;
    let baseline = baseline(&t, run)?;
    let opts = t.config.pipeline_options();
    let outcomes = if candidates.len() == 1 {
        vec![evaluate_candidate(&mut t.ws, &t.task, &candidates[0], &*t.transport, baseline, &opts)]
    } else {
        evaluate_group(&t.ws, &t.task, &candidates, &*t.transport, baseline, &opts, t.config.jobs)?
    };
    let results = run.results.as_ref().map(ResultsFile::new);
    let id = run_id(run, "eval");
    let mut worst = 0;
    for (dir, outcome) in dirs.iter().zip(outcomes) {
        let outcome: CandidateOutcome<f64> = match outcome {
            Ok(o) => o,
            Err(e) => {
                eprintln!("{}: {e}", dir.display());
                worst = worst.max(EXIT_INFRA);
                continue;
            }
        };
        for line in &outcome.stage_log {
            log::info!("{}: {line}", dir.display());
        }
        if !outcome.result.errors.is_empty() {
            log::info!("{}: {} error record(s)", dir.display(), outcome.result.errors.len());
        }
        if let Some(rf) = &results {
            rf.append(&ResultRecord {
                source: RecordSource::Eval,
                run_id: id.clone(),
                result: outcome.result.clone(),
                detail: Some(json!({
                    "candidate_dir": dir,
                    "stage_log": outcome.stage_log,
                    "exec_error": outcome.exec_error,
                })),
            })?;
        }
        println!(
            "{}",
            json!({
                "candidate": dir,
                "exit_code": outcome.exit_code(),
                "result": outcome.result,
                "exec_error": outcome.exec_error,
                "graph_diff": outcome.graph_diff,
            })
        );
        worst = worst.max(code(outcome.exit_code()));
    }
    Ok(worst)
}

fn agent(
    target: &TargetArgs,
    run: &RunArgs,
    bank: &Path,
    transcript: Option<&Path>,
    memory: Option<&Path>,
    summary: Option<&Path>,
) -> Result<u8> {
    let mut t = open_target(target, run)?;
    let bank = PromptBank::load(bank)?;
    let client: Box<dyn LlmClient> = match transcript {
        Some(p) => Box::new(ScriptedClient::from_file(p)?),
        None => Box::new(HttpClient::from_env()?),
    };
    let mut memory = match memory {
        Some(p) => ReflectiveMemory::open(p)?,
        None => ReflectiveMemory::in_memory(),
    };
    let reference_src = t
        .task
        .reference_model
        .as_ref()
        .map(|p| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let baseline = baseline(&t, run)?;
    let results = run.results.as_ref().map(ResultsFile::new);
    let outcome = {
        let mut evaluator = PipelineEvaluator {
            ws: &mut t.ws,
            transport: &*t.transport,
            baseline_ms: baseline,
            opts: t.config.pipeline_options(),
        };
        run_episode(
            Episode {
                task: &t.task,
                bank: &bank,
                reference_src,
                client: &*client,
                memory: &mut memory,
                results: results.as_ref(),
                config: EpisodeConfig {
                    max_iters: t.config.max_iters,
                    run_id: run_id(run, "agent"),
                },
            },
            &mut evaluator,
        )
    };
    match outcome {
        Ok(ep) => {
            write_summary(&ep, summary)?;
            Ok(episode_code(&ep))
        }
        Err(e) => {
            if let Some(partial) = e.partial() {
                write_summary(partial, summary)?;
            }
            Err(e.into())
        }
    }
}

fn write_summary(ep: &EpisodeResult, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(ep)?;
    if let Some(p) = path {
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{text}");
    Ok(())
}

fn episode_code(ep: &EpisodeResult) -> u8 {
    if ep.stop_reason == Some(StopReason::InfrastructureError) {
        return EXIT_INFRA;
    }
    match ep.best_candidate() {
        Some(c) => code(c.result.exit_code()),
        None => EXIT_INFRA,
    }
}

fn bench(target: &TargetArgs, run: &RunArgs) -> Result<u8> {
    let t = open_target(target, run)?;
    ensure!(t.config.bench, "bench cannot be combined with --no-bench");
    let b = build(&t.ws, BuildMode::Incremental, t.ws.config().build.timeout_s)?;
    if !b.success {
        eprintln!("{}", b.log_text);
        bail!("the unmodified framework does not build");
    }
    let profile: PerfProfile = run_benchmark(&t.ws, &t.task, &*t.transport, &t.config.bench_options())?;
    let mut cache = baseline_cache(run)?;
    cache.insert(&t.transport.endpoint_id(), &t.task.id, profile.mean_ms)?;
    println!("{}", serde_json::to_string_pretty(&profile)?);
    Ok(0)
}

fn report(results: &Path, thresholds: &[f64], out: Option<&Path>) -> Result<u8> {
    let records: Vec<ResultRecord<f64>> = ResultsFile::new(results).read_all()?;
    ensure!(!records.is_empty(), "{} holds no records", results.display());
    let all: Vec<_> = records.into_iter().map(|r| r.result).collect();
    let best = best_per_task(&all);
    let report = compute_metrics(&best, thresholds)?;
    print!("{}", render_table(&report));
    if let Some(p) = out {
        let written = emit_report(&report, p)?;
        log::info!("report written to {}", written.display());
    }
    Ok(0)
}

fn reward_file(path: &Path, shaped: bool) -> Result<u8> {
    let records: Vec<ResultRecord<f64>> = ResultsFile::new(path).read_all()?;
    for rec in records {
        let r = &rec.result;
        let reward = grpo_reward(r.compiled, r.correct, r.t_baseline_ms, r.t_generated_ms, shaped)
            .with_context(|| format!("{} iteration {}", r.task_id, r.iteration))?;
        println!("{}\t{}\t{reward}", r.task_id, r.iteration);
    }
    Ok(0)
}

fn workspace(action: WorkspaceAction) -> Result<u8> {
    match action {
        WorkspaceAction::Clone { framework, label, into } => {
            let ws = Workspace::open(&framework)?;
            let copy = match into {
                Some(parent) => {
                    let stem = ws
                        .root()
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "workspace".into());
                    ws.clone_into(&parent, &format!("{stem}-{label}"), &label)?
                }
                None => ws.clone_workspace(&label)?,
            };
            println!("{}", copy.root().display());
        }
        WorkspaceAction::Restore { framework } => {
            let mut ws = Workspace::open(&framework)?;
            match ws.injected().cloned() {
                Some(inj) => {
                    ws.restore()?;
                    println!("restored {} file(s) injected for task '{}'", inj.files.len(), inj.task_id);
                }
                None => println!("nothing to restore"),
            }
        }
    }
    Ok(0)
}
