//! Shared fixtures: a shell-script framework that "builds" and "runs" an
//! ArgMax operator, plus canned model replies.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use kforge_core::agents::{
    run_episode, Episode, EpisodeConfig, EpisodeError, EpisodeResult, PipelineEvaluator, PromptBank, ReflectiveMemory,
    ScriptedClient,
};
use kforge_core::bench::BenchOptions;
use kforge_core::graph::{AttrValue, GraphDesc, GraphNode};
use kforge_core::pipeline::PipelineOptions;
use kforge_core::task::{Mechanism, OperatorCategory, TaskSpec};
use kforge_core::results::{ResultRecord, ResultsFile};
use kforge_core::tensor::Tensor;
use kforge_core::transport::LocalProcess;
use kforge_core::workspace::{KernelCandidate, Workspace};

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn copy_tree(from: &Path, to: &Path) {
    for entry in walkdir::WalkDir::new(from) {
        let entry = entry.unwrap();
        let rel = entry.path().strip_prefix(from).unwrap();
        let dest = to.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&dest).unwrap();
        } else {
            fs::copy(entry.path(), &dest).unwrap();
        }
    }
}

pub struct FakeFw {
    pub dir: tempfile::TempDir,
    pub root: PathBuf,
    pub staging: PathBuf,
    pub task: TaskSpec,
}

pub fn graph(op: &str) -> GraphDesc {
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
}

/// Fresh copy of the fake framework with its tensors and graphs written.
pub fn fake_framework() -> FakeFw {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("fakefw");
    copy_tree(&fixtures_dir().join("fakefw"), &root);
    fs::set_permissions(root.join("runner.sh"), fs::Permissions::from_mode(0o755)).unwrap();
    let data = root.join("data");
    fs::create_dir_all(&data).unwrap();
    Tensor::f32(vec![2, 3], vec![0.1, 0.5, 0.9, 0.8, 0.2, 0.3]).unwrap().write(&data.join("in_0.tensor")).unwrap();
    Tensor::f32(vec![2], vec![2.0, 0.0]).unwrap().write(&data.join("out_0.tensor")).unwrap();
    Tensor::f32(vec![2], vec![2.0, 1.0]).unwrap().write(&data.join("wrong_0.tensor")).unwrap();
    fs::write(data.join("graph.json"), graph("ArgMax").to_json()).unwrap();
    fs::write(data.join("graph_wrong.json"), graph("ArgMin").to_json()).unwrap();
    let staging = dir.path().join("staging");
    fs::create_dir_all(&staging).unwrap();
    let task = TaskSpec {
        id: "argmax_001".into(),
        operator_name: "ArgMax".into(),
        category: OperatorCategory::Reduction,
        mechanism: Mechanism::Atomic,
        attributes: BTreeMap::from([("axis".to_string(), "1".to_string())]),
        reference_graph: data.join("graph.json"),
        reference_inputs: vec![data.join("in_0.tensor")],
        reference_outputs: vec![data.join("out_0.tensor")],
        target_file_names: vec!["CPUArgMax.hpp".into(), "CPUArgMax.cpp".into()],
        baseline_latency_ms: Some(0.409),
        description: Some("index of the largest value along an axis".into()),
        reference_model: None,
    };
    FakeFw {
        dir,
        root,
        staging,
        task,
    }
}

pub const HPP: &str = "#pragma once\nclass CPUArgMax {\npublic:\n    int onExecute();\n};";

/// A candidate whose .cpp body is `cpp`.
pub fn candidate(task: &TaskSpec, cpp: &str) -> KernelCandidate {
    let files: IndexMap<String, String> = [
        ("CPUArgMax.hpp".to_string(), format!("{HPP}\n")),
        ("CPUArgMax.cpp".to_string(), format!("{cpp}\n")),
    ]
    .into_iter()
    .collect();
    KernelCandidate::new(task, 0, files).unwrap()
}

/// Pipeline options with the utilization gate off and few iterations.
pub fn quick_opts(bench: bool) -> PipelineOptions {
    PipelineOptions {
        bench: bench.then_some(BenchOptions {
            iters: 20,
            warmup: 2,
            gate: None,
        }),
        ..PipelineOptions::default()
    }
}

pub fn cpp_ok(tag: &str) -> String {
    format!("#include \"CPUArgMax.hpp\"\n// {tag}\nint CPUArgMax::onExecute() {{\n    return 0;\n}}")
}

pub fn cpp_syntax_error() -> String {
    "#include \"CPUArgMax.hpp\"\nint CPUArgMax::onExecute() {\n    return 0 // SYNTAX_ERROR\n}".into()
}

/// Coder reply with both files, each named on its block's first line.
pub fn coder_reply(cpp: &str) -> String {
    format!("Here is the implementation.\n```cpp\nCPUArgMax.hpp\n{HPP}\n```\n\n```cpp\nCPUArgMax.cpp\n{cpp}\n```\n")
}

pub fn repair_reply() -> String {
    "The statement is missing a semicolon.\n```error_suggestion\n{\n    \"local_error_suggestion\": [\"add the missing ';' after return 0\"],\n    \"crossfile_error_suggestion\": []\n}\n```\n".into()
}

pub fn correction_reply() -> String {
    "```functionality_suggestion\n{\"suggestion1\": \"compare with > instead of >=\"}\n```\n".into()
}

pub fn accel_reply(method: &str) -> String {
    format!(
        "```json\n{{\"bottleneck\": \"scalar scan of each row\", \"optimisation method\": \"{method}\", \"modification plan\": \"process four lanes per step\"}}\n```\n"
    )
}

#[derive(Debug, serde::Deserialize)]
pub struct ExpectedRecord {
    pub file: String,
    pub line: u32,
    pub message: String,
    pub classification: kforge_core::diagnostics::Classification,
}

#[derive(Debug, serde::Deserialize)]
pub struct LogAnnotation {
    pub candidates: Vec<String>,
    pub records: Vec<ExpectedRecord>,
    pub other_errors: Vec<String>,
}

/// (name, log text, annotation) for every fixture log.
pub fn log_corpus() -> Vec<(String, String, LogAnnotation)> {
    let dir = fixtures_dir().join("logs");
    let mut names: Vec<PathBuf> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "log"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
            let ann = fs::read_to_string(dir.join(format!("{stem}.expected.json"))).unwrap();
            (stem, fs::read_to_string(&p).unwrap(), serde_json::from_str(&ann).unwrap())
        })
        .collect()
}

/// A query line and the span it should resolve to (`None` for no scope).
#[derive(Debug)]
pub struct SpanQuery {
    pub line: u32,
    pub id: String,
    pub expected: Option<(u32, u32)>,
}

/// Read `@start:id`, `@end:id` and `@query:id` markers from comments.
pub fn span_queries(text: &str) -> Vec<SpanQuery> {
    let mut starts = BTreeMap::new();
    let mut ends = BTreeMap::new();
    let mut queries = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let n = i as u32 + 1;
        let Some(comment) = l.split("//").nth(1) else { continue };
        for tok in comment.split_whitespace() {
            if let Some(id) = tok.strip_prefix("@start:") {
                starts.insert(id.to_string(), n);
            } else if let Some(id) = tok.strip_prefix("@end:") {
                ends.insert(id.to_string(), n);
            } else if let Some(id) = tok.strip_prefix("@query:") {
                queries.push((n, id.to_string()));
            }
        }
    }
    queries
        .into_iter()
        .map(|(line, id)| {
            let expected = (id != "none").then(|| (starts[&id], ends[&id]));
            SpanQuery { line, id, expected }
        })
        .collect()
}

pub fn source_corpus() -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(fixtures_dir().join("sources"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    v.sort();
    v
}

pub fn episode_bank() -> PromptBank {
    let mut b = PromptBank::default();
    b.headers.insert("Reduction".into(), vec!["class Execution { virtual int onExecute() = 0; };".into()]);
    b.examples.insert("Atomic".into(), "An atomic example.".into());
    b
}

pub struct EpisodeRun {
    pub result: Result<EpisodeResult<f64>, EpisodeError<f64>>,
    pub prompts: Vec<String>,
    pub hash_unchanged: bool,
    pub records: Vec<ResultRecord<f64>>,
}

/// Run an episode on a fresh fake framework with a scripted client.
pub fn run_scripted_episode(replies: Vec<String>, bench: bool, max_iters: u32) -> EpisodeRun {
    let fw = fake_framework();
    let mut ws = Workspace::open(&fw.root).unwrap();
    let before = ws.tree_hash().unwrap();
    let transport = LocalProcess::new(&fw.staging);
    let client = ScriptedClient::new(replies);
    let mut memory = ReflectiveMemory::in_memory();
    let results = ResultsFile::new(fw.dir.path().join("results.jsonl"));
    let bank = episode_bank();
    let result = {
        let mut eval = PipelineEvaluator {
            ws: &mut ws,
            transport: &transport,
            baseline_ms: Some(0.409),
            opts: quick_opts(bench),
        };
        run_episode(
            Episode {
                task: &fw.task,
                bank: &bank,
                reference_src: Some("def forward(x): return x.argmax(1)".into()),
                client: &client,
                memory: &mut memory,
                results: Some(&results),
                config: EpisodeConfig {
                    max_iters,
                    run_id: "t".into(),
                },
            },
            &mut eval,
        )
    };
    let records = if results.path().exists() { results.read_all().unwrap() } else { Vec::new() };
    EpisodeRun {
        result,
        prompts: client.prompts(),
        hash_unchanged: ws.tree_hash().unwrap() == before,
        records,
    }
}

pub fn repair_transcript() -> Vec<String> {
    vec![coder_reply(&cpp_syntax_error()), repair_reply(), coder_reply(&cpp_ok("fixed"))]
}

/// Benchmarked first version, then nine slower rewrites.
pub fn never_improving_transcript() -> Vec<String> {
    let mut v = vec![coder_reply(&format!("{}\n// TIME_US=409", cpp_ok("v0")))];
    for i in 1..10 {
        v.push(accel_reply(&format!("method {i}")));
        v.push(coder_reply(&format!("{}\n// TIME_US=500", cpp_ok(&format!("v{i}")))));
    }
    v
}
