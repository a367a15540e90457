//! End-to-end runs of the `kforge` binary against the shell-script framework
//! fixture shared with the core crate.

use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kforge_core::graph::{AttrValue, GraphDesc, GraphNode};
use kforge_core::tensor::Tensor;
use kforge_core::workspace::{tree_hash, KernelCandidate, Workspace};
use kforge_core::Manifest;
use serde_json::Value;

const HPP: &str = "#pragma once\nclass CPUArgMax {\npublic:\n    int onExecute();\n};\n";

struct Env {
    dir: tempfile::TempDir,
    fw: PathBuf,
    manifest: PathBuf,
}

impl Env {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn hash(&self) -> String {
        tree_hash(&self.fw, &[PathBuf::from("build")]).unwrap()
    }

    /// Candidate directory whose .cpp carries `body`.
    fn candidate(&self, name: &str, body: &str) -> PathBuf {
        let d = self.path(name);
        fs::create_dir_all(&d).unwrap();
        fs::write(d.join("CPUArgMax.hpp"), HPP).unwrap();
        fs::write(
            d.join("CPUArgMax.cpp"),
            format!("#include \"CPUArgMax.hpp\"\nint CPUArgMax::onExecute() {{\n    return 0;{body}\n}}\n"),
        )
        .unwrap();
        d
    }

    /// Common flags for commands that evaluate on the fixture.
    fn target_args(&self) -> Vec<String> {
        vec![
            "--manifest".into(),
            self.manifest.display().to_string(),
            "--framework".into(),
            self.fw.display().to_string(),
            "--task".into(),
            "argmax_001".into(),
            "--staging".into(),
            self.path("staging").display().to_string(),
            "--iters".into(),
            "10".into(),
            "--warmup".into(),
            "1".into(),
            "--skip-util-gate".into(),
        ]
    }
}

fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let dest = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_tree(&entry.path(), &dest);
        } else {
            fs::copy(entry.path(), &dest).unwrap();
        }
    }
}

fn graph(op: &str) -> String {
    GraphDesc {
        nodes: vec![GraphNode {
            op_type: op.into(),
            name: "argmax0".into(),
            attributes: BTreeMap::from([("axis".to_string(), AttrValue::Int(1))]),
            input_shapes: vec![vec![2, 3]],
            output_shapes: vec![vec![2]],
            dtypes: vec!["float32".into()],
        }],
    }
    .to_json()
}

fn setup() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let fw = dir.path().join("fakefw");
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/fakefw");
    copy_tree(&fixture, &fw);
    fs::set_permissions(fw.join("runner.sh"), fs::Permissions::from_mode(0o755)).unwrap();
    let data = fw.join("data");
    fs::create_dir_all(&data).unwrap();
    Tensor::f32(vec![2, 3], vec![0.1, 0.5, 0.9, 0.8, 0.2, 0.3]).unwrap().write(&data.join("in_0.tensor")).unwrap();
    Tensor::f32(vec![2], vec![2.0, 0.0]).unwrap().write(&data.join("out_0.tensor")).unwrap();
    Tensor::f32(vec![2], vec![2.0, 1.0]).unwrap().write(&data.join("wrong_0.tensor")).unwrap();
    fs::write(data.join("graph.json"), graph("ArgMax")).unwrap();
    fs::write(data.join("graph_wrong.json"), graph("ArgMin")).unwrap();
    fs::create_dir_all(dir.path().join("staging")).unwrap();
    let manifest = dir.path().join("tasks.toml");
    fs::write(
        &manifest,
        r#"schema_version = "1"

[[tasks]]
id = "argmax_001"
operator_name = "ArgMax"
category = "Reduction"
mechanism = "Atomic"
attributes = { axis = 1 }
reference_graph = "fakefw/data/graph.json"
reference_inputs = ["fakefw/data/in_0.tensor"]
reference_outputs = ["fakefw/data/out_0.tensor"]
target_file_names = ["CPUArgMax.hpp", "CPUArgMax.cpp"]
baseline_latency_ms = 0.409
description = "index of the largest value along an axis"
"#,
    )
    .unwrap();
    Env { dir, fw, manifest }
}

fn kforge<S: AsRef<str>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kforge"))
        .args(args.iter().map(AsRef::as_ref))
        .env_remove("KF_LLM_ENDPOINT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn eval_lines(o: &Output) -> Vec<Value> {
    stdout(o).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn eval(env: &Env, extra: &[String]) -> Output {
    let mut args = vec!["eval".to_string()];
    args.extend(env.target_args());
    args.extend(extra.iter().cloned());
    kforge(&args)
}

fn cand_args(dirs: &[&Path]) -> Vec<String> {
    dirs.iter()
        .flat_map(|d| ["--candidate".to_string(), d.display().to_string()])
        .collect()
}

#[test]
fn eval_correct_candidate_benchmarks_and_records() {
    let env = setup();
    let before = env.hash();
    let c = env.candidate("good", "");
    let results = env.path("results.jsonl");
    let mut extra = cand_args(&[&c]);
    extra.extend(["--results".into(), results.display().to_string()]);
    let o = eval(&env, &extra);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let line = &eval_lines(&o)[0];
    assert_eq!(line["result"]["stage"], "Benchmarked");
    // the runner reports 409 us against a pinned 0.409 ms baseline
    assert!((line["result"]["speedup"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    let records = fs::read_to_string(&results).unwrap();
    assert_eq!(records.lines().count(), 1);
    assert_eq!(env.hash(), before);
}

#[test]
fn eval_syntax_error_exits_2_with_errors() {
    let env = setup();
    let before = env.hash();
    let c = env.candidate("broken", " // SYNTAX_ERROR");
    let o = eval(&env, &cand_args(&[&c]));
    assert_eq!(code(&o), 2);
    let line = &eval_lines(&o)[0];
    assert_eq!(line["result"]["compiled"], false);
    assert!(!line["result"]["errors"].as_array().unwrap().is_empty());
    assert_eq!(env.hash(), before);
}

#[test]
fn eval_wrong_math_exits_3_with_max_abs_diff() {
    let env = setup();
    let before = env.hash();
    let c = env.candidate("wrong", " // WRONG_RESULT");
    let o = eval(&env, &cand_args(&[&c]));
    assert_eq!(code(&o), 3);
    let line = &eval_lines(&o)[0];
    assert_eq!(line["result"]["correct"], false);
    assert_eq!(line["result"]["max_abs_diff"].as_f64(), Some(1.0));
    assert!(!line["graph_diff"].as_array().unwrap().is_empty());
    assert_eq!(env.hash(), before);
}

#[test]
fn eval_no_bench_stops_at_verified() {
    let env = setup();
    let c = env.candidate("good", "");
    let mut extra = cand_args(&[&c]);
    extra.push("--no-bench".into());
    let o = eval(&env, &extra);
    assert_eq!(code(&o), 0);
    let line = &eval_lines(&o)[0];
    assert_eq!(line["result"]["stage"], "Verified");
    assert!(line["result"]["speedup"].is_null());
}

#[test]
fn group_eval_keeps_input_order_and_isolates_failures() {
    let env = setup();
    let before = env.hash();
    let dirs = [
        env.candidate("a", ""),
        env.candidate("b", " // SYNTAX_ERROR"),
        env.candidate("c", " // WRONG_RESULT"),
        env.candidate("d", " // TIME_US=204.5"),
        env.candidate("e", ""),
    ];
    let refs: Vec<&Path> = dirs.iter().map(PathBuf::as_path).collect();
    let mut extra = cand_args(&refs);
    extra.extend(["--jobs".into(), "3".into()]);
    let o = eval(&env, &extra);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let lines = eval_lines(&o);
    let codes: Vec<i64> = lines.iter().map(|l| l["exit_code"].as_i64().unwrap()).collect();
    assert_eq!(codes, vec![0, 2, 3, 0, 0]);
    for (l, d) in lines.iter().zip(&dirs) {
        assert_eq!(l["candidate"].as_str().unwrap(), d.display().to_string());
    }
    assert!((lines[3]["result"]["speedup"].as_f64().unwrap() - 2.0).abs() < 1e-9);
    assert_eq!(env.hash(), before);
    // clones are cleaned up
    let leftovers: Vec<_> = fs::read_dir(env.dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("fakefw-"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn eval_rejects_bad_config_and_dirty_workspace() {
    let env = setup();
    let c = env.candidate("good", "");
    let mut extra = cand_args(&[&c]);
    extra.extend(["--tolerance".into(), "0".into()]);
    assert_eq!(code(&eval(&env, &extra)), 4);

    let m: Manifest = kforge_core::task::load_manifest(&env.manifest).unwrap();
    let task = m.task("argmax_001").unwrap();
    let mut ws = Workspace::open(&env.fw).unwrap();
    ws.inject(task, &KernelCandidate::from_dir(task, 0, &c).unwrap()).unwrap();
    let o = eval(&env, &cand_args(&[&c]));
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("workspace restore"));
}

#[test]
fn workspace_restore_undoes_leftover_injection() {
    let env = setup();
    let before = env.hash();
    let c = env.candidate("good", " // left behind");
    let m = kforge_core::task::load_manifest(&env.manifest).unwrap();
    let task = m.task("argmax_001").unwrap();
    let mut ws = Workspace::open(&env.fw).unwrap();
    ws.inject(task, &KernelCandidate::from_dir(task, 0, &c).unwrap()).unwrap();
    assert_ne!(env.hash(), before);
    let fw = env.fw.display().to_string();
    let o = kforge(&["workspace", "restore", "--framework", &fw]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("restored 2 file(s)"));
    assert_eq!(env.hash(), before);
    let o = kforge(&["workspace", "restore", "--framework", &fw]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("nothing to restore"));
}

#[test]
fn workspace_clone_copies_tree() {
    let env = setup();
    let fw = env.fw.display().to_string();
    let into = env.path("clones");
    let o = kforge(&["workspace", "clone", "--framework", &fw, "--label", "w1", "--into", &into.display().to_string()]);
    assert_eq!(code(&o), 0);
    let copy = PathBuf::from(stdout(&o).trim());
    assert_eq!(copy, into.join("fakefw-w1"));
    assert_eq!(tree_hash(&copy, &[PathBuf::from("build")]).unwrap(), env.hash());
}

fn transcript(env: &Env, replies: &[String]) -> PathBuf {
    let p = env.path("transcript.json");
    fs::write(&p, serde_json::to_string(replies).unwrap()).unwrap();
    p
}

fn bank(env: &Env) -> PathBuf {
    let p = env.path("bank.toml");
    fs::write(
        &p,
        "[headers]\nReduction = [\"class Execution { virtual int onExecute() = 0; };\"]\n\n[examples]\nAtomic = \"An atomic example.\"\n",
    )
    .unwrap();
    p
}

fn coder_reply(tag: &str) -> String {
    format!(
        "```cpp\nCPUArgMax.hpp\n{HPP}```\n\n```cpp\nCPUArgMax.cpp\n#include \"CPUArgMax.hpp\"\nint CPUArgMax::onExecute() {{\n    return 0;{tag}\n}}\n```\n"
    )
}

fn agent(env: &Env, transcript: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["agent".to_string()];
    args.extend(env.target_args());
    args.extend([
        "--bank".into(),
        bank(env).display().to_string(),
        "--transcript".into(),
        transcript.display().to_string(),
    ]);
    args.extend(extra.iter().map(|s| s.to_string()));
    kforge(&args)
}

#[test]
fn agent_repairs_to_verified() {
    let env = setup();
    let before = env.hash();
    let replies = [
        coder_reply(" // SYNTAX_ERROR"),
        "```error_suggestion\n{\"local_error_suggestion\": [\"add the ';'\"], \"crossfile_error_suggestion\": []}\n```\n".to_string(),
        coder_reply(""),
    ];
    let t = transcript(&env, &replies);
    let results = env.path("agent.jsonl");
    let summary = env.path("summary.json");
    let o = agent(
        &env,
        &t,
        &[
            "--no-bench",
            "--results",
            &results.display().to_string(),
            "--summary",
            &summary.display().to_string(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s: Value = serde_json::from_str(&fs::read_to_string(&summary).unwrap()).unwrap();
    let cands = s["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 2);
    assert_eq!(cands[1]["result"]["stage"], "Verified");
    assert_eq!(s["stop_reason"], "VerifiedWithoutBenchmark");
    assert_eq!(fs::read_to_string(&results).unwrap().lines().count(), 2);
    assert_eq!(env.hash(), before);
}

#[test]
fn agent_max_iters_one_yields_one_candidate() {
    let env = setup();
    let t = transcript(&env, &[coder_reply(" // SYNTAX_ERROR")]);
    let o = agent(&env, &t, &["--max-iters", "1", "--no-bench"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let s: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(s["candidates"].as_array().unwrap().len(), 1);
    assert_eq!(s["stop_reason"], "MaxIterations");
}

#[test]
fn agent_missing_transcript_is_infra_error() {
    let env = setup();
    let o = agent(&env, &env.path("nope.json"), &["--no-bench"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn report_single_task_and_empty_file() {
    let env = setup();
    let results = env.path("results.jsonl");
    let dirs = [env.candidate("a", " // SYNTAX_ERROR"), env.candidate("b", "")];
    for d in &dirs {
        let mut extra = cand_args(&[d]);
        extra.extend(["--results".into(), results.display().to_string()]);
        eval(&env, &extra);
    }
    let out = env.path("report.json");
    let o = kforge(&["report", "--results", &results.display().to_string(), "--out", &out.display().to_string()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    assert!(table.contains("100.0"), "{table}");
    let report: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["n_tasks"], 1);
    assert_eq!(report["csr_pct"].as_f64(), Some(100.0));
    assert_eq!(report["fcr_pct"].as_f64(), Some(100.0));
    // speedup is exactly 1.0: above 0.5 only
    let fast: Vec<f64> = report["fast_p"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["pct"].as_f64().unwrap())
        .collect();
    assert_eq!(fast, vec![100.0, 0.0, 0.0]);
    assert_eq!(report["per_category"].as_object().map(|m| m.len()).unwrap_or(0), 12);

    let empty = env.path("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let o = kforge(&["report", "--results", &empty.display().to_string()]);
    assert_eq!(code(&o), 4);
}

#[test]
fn reward_single_and_from_results() {
    let o = kforge(&["reward", "--compiled", "--correct", "--baseline-ms", "0.409", "--generated-ms", "0.06", "--shaped"]);
    assert_eq!(code(&o), 0);
    let r: f64 = stdout(&o).trim().parse().unwrap();
    assert!((r - (0.6 + 0.409 / 0.06)).abs() < 1e-12);
    let o = kforge(&["reward", "--compiled"]);
    assert_eq!(stdout(&o).trim(), "0");
    let o = kforge(&["reward", "--compiled", "--shaped"]);
    assert_eq!(stdout(&o).trim(), "0.3");
    let o = kforge(&["reward", "--compiled", "--correct"]);
    assert_eq!(code(&o), 4);

    let env = setup();
    let results = env.path("results.jsonl");
    let c = env.candidate("fast", " // TIME_US=102.25");
    let mut extra = cand_args(&[&c]);
    extra.extend(["--results".into(), results.display().to_string()]);
    assert_eq!(code(&eval(&env, &extra)), 0);
    let o = kforge(&["reward", "--results", &results.display().to_string()]);
    let line = stdout(&o);
    let fields: Vec<&str> = line.trim().split('\t').collect();
    assert_eq!(fields[0], "argmax_001");
    assert!((fields[2].parse::<f64>().unwrap() - 4.3).abs() < 1e-9);
}

#[test]
fn bench_measures_and_caches_baseline() {
    let env = setup();
    let cache = env.path("baselines.json");
    let mut args = vec!["bench".to_string()];
    args.extend(env.target_args());
    args.extend(["--baseline-cache".into(), cache.display().to_string()]);
    let o = kforge(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let p: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((p["mean_ms"].as_f64().unwrap() - 0.409).abs() < 1e-12);
    assert_eq!(p["samples_us"].as_array().unwrap().len(), 10);
    let cached: Value = serde_json::from_str(&fs::read_to_string(&cache).unwrap()).unwrap();
    assert!(cached.to_string().contains("argmax_001"));
}

#[test]
fn validate_manifest_and_framework() {
    let env = setup();
    let m = env.manifest.display().to_string();
    let o = kforge(&["validate", "--manifest", &m, "--framework", &env.fw.display().to_string()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.starts_with("1 task(s)"));
    assert_eq!(out.lines().count(), 13);

    fs::remove_file(env.fw.join("ops/CPUArgMax.hpp")).unwrap();
    let o = kforge(&["validate", "--manifest", &m, "--framework", &env.fw.display().to_string()]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("CPUArgMax.hpp"));
}
