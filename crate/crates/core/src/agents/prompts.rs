//! Prompt text for the three agents. Each builder is a pure function of its
//! inputs so transcripts replay identically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use super::{AgentPlan, HistoryEntry, PlanKind, PlanSource};
use crate::bench::PerfProfile;
use crate::diagnostics::DiagnosisDocument;
use crate::graph::{GraphDesc, GraphMismatch};
use crate::scalar::Scalar;
use crate::task::TaskSpec;
use crate::workspace::KernelCandidate;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt bank has no {bank} entry for {key}")]
    MissingBankEntry { bank: &'static str, key: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
}

/// Framework header excerpts per operator category and one worked example
/// per mechanism.
///
/// ```toml
/// [headers]
/// Activation = ["@headers/activation.hpp"]
/// [examples]
/// Atomic = "@examples/atomic.md"
/// ```
///
/// A value starting with `@` is a path relative to the bank file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptBank {
    #[serde(default)]
    pub headers: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub examples: BTreeMap<String, String>,
}

impl PromptBank {
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |source| PromptError::Io { path: p, source }
        };
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        let mut bank: PromptBank = toml::from_str(&text).map_err(|source| PromptError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |v: &mut String| -> Result<(), PromptError> {
            if let Some(rel) = v.strip_prefix('@') {
                let p = base.join(rel.trim());
                *v = std::fs::read_to_string(&p).map_err(io(&p))?;
            }
            Ok(())
        };
        for list in bank.headers.values_mut() {
            list.iter_mut().try_for_each(resolve)?;
        }
        bank.examples.values_mut().try_for_each(resolve)?;
        Ok(bank)
    }

    fn headers_for(&self, task: &TaskSpec) -> Result<&[String], PromptError> {
        let key = task.category.as_str();
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(key))
            .map(|(_, v)| v.as_slice())
            .ok_or(PromptError::MissingBankEntry {
                bank: "header",
                key: key.into(),
            })
    }

    fn example_for(&self, task: &TaskSpec) -> Result<&str, PromptError> {
        let key = task.mechanism.as_str();
        self.examples
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(key))
            .map(|(_, v)| v.as_str())
            .ok_or(PromptError::MissingBankEntry {
                bank: "example",
                key: key.into(),
            })
    }
}

/// "write the A and B files separately", or the one-file form.
pub fn file_instruction(task: &TaskSpec) -> String {
    let names = &task.target_file_names;
    let list = match names.len() {
        0 => String::new(),
        1 => names[0].clone(),
        n => format!("{} and {}", names[..n - 1].join(", "), names[n - 1]),
    };
    if names.len() > 1 {
        format!("You need to write the {list} files separately.")
    } else {
        format!("You need to write the {list} file.")
    }
}

fn file_format_rules(task: &TaskSpec) -> String {
    let mut s = String::new();
    s.push_str(&file_instruction(task));
    s.push('\n');
    s.push_str(
        "Put each file in its own fenced code block. The first line inside each block must be \
         the file name and nothing else; the source starts on the second line.\n",
    );
    s
}

fn task_header(task: &TaskSpec) -> String {
    let mut s = format!(
        "Operator: {}\nCategory: {}\nMechanism: {}\n",
        task.operator_name, task.category, task.mechanism
    );
    if !task.attributes.is_empty() {
        s.push_str("Attributes:\n");
        for (k, v) in &task.attributes {
            let _ = writeln!(s, "  {k} = {v}");
        }
    }
    if let Some(d) = &task.description {
        let _ = writeln!(s, "Description: {d}");
    }
    s
}

fn code_section(cand: &KernelCandidate) -> String {
    let mut s = String::new();
    for (name, text) in &cand.files {
        let _ = write!(s, "```cpp\n{name}\n{text}");
        if !text.ends_with('\n') {
            s.push('\n');
        }
        s.push_str("```\n");
    }
    s
}

/// First prompt of an episode. `reference_src` is the reference model
/// source, if the task has one.
pub fn build_initial_prompt(
    task: &TaskSpec,
    bank: &PromptBank,
    reference_src: Option<&str>,
) -> Result<String, PromptError> {
    let headers = bank.headers_for(task)?;
    let example = bank.example_for(task)?;
    let mut p = String::new();
    let _ = writeln!(
        p,
        "You are an engineer adding a new CPU operator to an on-device inference framework.\n\
         Implement the operator described below so that its outputs match the reference model.\n"
    );
    p.push_str(&task_header(task));
    p.push_str(
        "\nConstraints:\n\
         - Use only C++17 and the framework's existing headers.\n\
         - Keep the operator's class and registration names consistent with the file names.\n\
         - Handle every shape the attributes allow; do not hard-code the test shapes.\n\
         - Reply with code blocks only, no explanation.\n",
    );
    p.push_str("\nRelevant framework headers:\n");
    for h in headers {
        let _ = write!(p, "```cpp\n{h}");
        if !h.ends_with('\n') {
            p.push('\n');
        }
        p.push_str("```\n");
    }
    let _ = write!(p, "\nExample of a finished {} operator:\n{example}", task.mechanism);
    if !example.ends_with('\n') {
        p.push('\n');
    }
    if let Some(src) = reference_src {
        let _ = write!(p, "\nReference model:\n```python\n{src}");
        if !src.ends_with('\n') {
            p.push('\n');
        }
        p.push_str("```\n");
    }
    p.push('\n');
    p.push_str(&file_format_rules(task));
    Ok(p)
}

/// Debugger prompt after a failed build.
pub fn build_repair_prompt(task: &TaskSpec, cand: &KernelCandidate, doc: &DiagnosisDocument) -> String {
    let mut p = String::new();
    p.push_str("The operator below failed to compile inside the framework.\n\n");
    p.push_str(&task_header(task));
    p.push_str("\nCurrent code:\n");
    p.push_str(&code_section(cand));
    p.push_str("\nCompiler errors, grouped by whether they stay within one file (local) or involve other files (crossfile):\n```json\n");
    p.push_str(&doc.to_json());
    p.push_str("\n```\n\n");
    p.push_str(
        "Study the errors and propose fixes. Do not write code. Answer with a block in this form:\n\
         ```error_suggestion\n\
         {\n\
         \x20   \"local_error_suggestion\": [\"...\"],\n\
         \x20   \"crossfile_error_suggestion\": [\"...\"]\n\
         }\n\
         ```\n",
    );
    p
}

/// Debugger prompt after a failed or crashing verification.
pub fn build_correction_prompt(
    task: &TaskSpec,
    cand: &KernelCandidate,
    exec_error: &str,
    ref_graph: Option<&GraphDesc>,
    target_graph: Option<&GraphDesc>,
    diffs: &[GraphMismatch],
) -> String {
    let mut p = String::new();
    p.push_str("The operator below compiles but its outputs do not match the reference.\n\n");
    p.push_str(&task_header(task));
    p.push_str("\nCurrent code:\n");
    p.push_str(&code_section(cand));
    let _ = write!(p, "\nTest result:\n{}\n", if exec_error.is_empty() { "(no detail)" } else { exec_error });
    for (label, g) in [("Reference graph", ref_graph), ("Graph built by this code", target_graph)] {
        match g {
            Some(g) => {
                let _ = write!(p, "\n{label}:\n```json\n{}\n```\n", g.to_json());
            }
            None => {
                let _ = write!(p, "\n{label}: unavailable\n");
            }
        }
    }
    if !diffs.is_empty() {
        p.push_str("\nGraph differences:\n");
        for d in diffs {
            let _ = writeln!(p, "- {d}");
        }
    }
    p.push_str(
        "\nFind what makes the results differ and propose fixes. Do not write code. Answer with a block in this form:\n\
         ```functionality_suggestion\n\
         {\n\
         \x20   \"suggestion1\": \"...\",\n\
         \x20   \"suggestion2\": \"...\"\n\
         }\n\
         ```\n",
    );
    p
}

/// Accelerator prompt for a verified candidate. `history` should hold
/// attempts on operators of the same category.
pub fn build_acceleration_prompt<T: Scalar>(
    task: &TaskSpec,
    cand: &KernelCandidate,
    perf: &PerfProfile<T>,
    history: &[HistoryEntry<T>],
) -> String {
    let mut p = String::new();
    p.push_str("The operator below is correct. Make it faster on the target CPU.\n\n");
    p.push_str(&task_header(task));
    p.push_str("\nCurrent code:\n");
    p.push_str(&code_section(cand));
    let _ = write!(
        p,
        "\nMeasured performance: mean latency {} ms, median {} ms over {} runs (backend {}, {} thread(s)).\n",
        perf.mean_ms,
        perf.median_ms,
        perf.samples_us.len(),
        perf.backend,
        perf.threads
    );
    let tried: Vec<&HistoryEntry<T>> = history
        .iter()
        .filter(|h| matches!(h.plan, PlanSource::Plan { plan: AgentPlan::Acceleration { .. } }))
        .collect();
    if !tried.is_empty() {
        p.push_str("\nOptimisations already tried on similar operators:\n");
        for h in tried {
            if let PlanSource::Plan {
                plan: AgentPlan::Acceleration { method, bottleneck, .. },
            } = &h.plan
            {
                let _ = write!(p, "- {} iteration {}: {method} (for: {bottleneck})", h.task_id, h.iteration);
                match h.outcome.speedup {
                    Some(s) => {
                        let _ = writeln!(p, " -> speedup {s}");
                    }
                    None => {
                        let _ = writeln!(p, " -> ended at {:?}", h.outcome.stage);
                    }
                }
            }
        }
        p.push_str("Do not propose a method from this list again unless you change it substantially.\n");
    }
    p.push_str(
        "\nName exactly one bottleneck, the one costing the most time, and return one and only one \
         optimisation method for it. Do not write code. Answer with a block in this form:\n\
         ```json\n\
         {\n\
         \x20   \"bottleneck\": \"...\",\n\
         \x20   \"optimisation method\": \"...\",\n\
         \x20   \"modification plan\": \"...\"\n\
         }\n\
         ```\n",
    );
    p
}

/// Coder prompt applying a plan to the latest code. Output is code only.
/// `repeat_history` is set when the plan repeats the previous one.
pub fn build_refinement_prompt<T: Scalar>(
    task: &TaskSpec,
    cand: &KernelCandidate,
    plan: &AgentPlan,
    repeat_history: Option<&[HistoryEntry<T>]>,
) -> String {
    let mut p = String::new();
    p.push_str(&task_header(task));
    p.push_str("\nCurrent code:\n");
    p.push_str(&code_section(cand));
    match plan {
        AgentPlan::Repair {
            local_suggestions,
            crossfile_suggestions,
        } => {
            p.push_str("\nFix the compile errors following these suggestions.\n");
            if !local_suggestions.is_empty() {
                p.push_str("Within the file:\n");
                for s in local_suggestions {
                    let _ = writeln!(p, "- {s}");
                }
            }
            if !crossfile_suggestions.is_empty() {
                p.push_str("Across files:\n");
                for s in crossfile_suggestions {
                    let _ = writeln!(p, "- {s}");
                }
            }
        }
        AgentPlan::Correction { suggestions } => {
            p.push_str("\nFix the wrong results following these suggestions.\n");
            for (i, s) in suggestions.iter().enumerate() {
                let _ = writeln!(p, "{}. {s}", i + 1);
            }
        }
        AgentPlan::Acceleration {
            bottleneck,
            method,
            plan,
        } => {
            let _ = write!(
                p,
                "\nSpeed up the code.\nBottleneck: {bottleneck}\nMethod: {method}\nPlan: {plan}\n\
                 Keep the results identical to the current code.\n"
            );
        }
    }
    if let Some(hist) = repeat_history {
        p.push_str("\nThis plan was already applied in the previous iteration. Results so far:\n");
        for h in hist {
            let _ = writeln!(
                p,
                "- iteration {}: {} -> {:?}{}",
                h.iteration,
                plan_label(&h.plan),
                h.outcome.stage,
                h.outcome.speedup.map(|s| format!(", speedup {s}")).unwrap_or_default()
            );
        }
        p.push_str("Apply it differently from before.\n");
    }
    p.push('\n');
    p.push_str(&file_format_rules(task));
    p.push_str("Output the complete files only, with no explanation.\n");
    p
}

fn plan_label(src: &PlanSource) -> String {
    match src {
        PlanSource::Initial => "initial".into(),
        PlanSource::InvalidPlan { kind } => format!("unusable {kind:?} plan"),
        PlanSource::Plan { plan } => match plan {
            AgentPlan::Repair { .. } => "repair".into(),
            AgentPlan::Correction { .. } => "correction".into(),
            AgentPlan::Acceleration { method, .. } => format!("acceleration ({method})"),
        },
    }
}

/// Appended to a re-asked plan prompt after an unusable answer.
pub fn plan_format_reminder(kind: PlanKind, problem: &str) -> String {
    format!(
        "\n\nYour previous answer could not be used: {problem}. Reply again with exactly one \
         ```{} block in the form shown above.\n",
        kind.block_tag()
    )
}

/// Appended to a re-asked Coder prompt after an unusable answer.
pub fn candidate_format_reminder(task: &TaskSpec, problem: &str) -> String {
    format!(
        "\n\nYour previous answer could not be used: {problem}. {} Start every code block with \
         the file name on its own line.\n",
        file_instruction(task)
    )
}
