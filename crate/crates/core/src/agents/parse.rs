//! Pulling plans and code out of free-form model replies.

use indexmap::IndexMap;
use std::sync::LazyLock;
use regex::Regex;
use serde_json::Value;
use thiserror::Error;

use super::{AgentPlan, PlanKind};
use crate::task::TaskSpec;
use crate::workspace::KernelCandidate;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("no ```{tag} block in response")]
    NoBlockFound { tag: String },
    #[error("malformed {tag} block: {reason}")]
    MalformedPlan { tag: String, reason: String, raw: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CandidateParseError {
    #[error("no code block for {0}")]
    MissingFile(String),
    #[error("code block for unexpected file {0}")]
    ExtraneousFile(String),
}

struct Block<'a> {
    info: &'a str,
    body: Vec<&'a str>,
    /// Last non-empty line before the opening fence.
    preceding: Option<&'a str>,
}

/// Fenced blocks in order. Fences may be indented; an unterminated final
/// block runs to the end of the text.
fn fenced_blocks(text: &str) -> Vec<Block<'_>> {
    let mut blocks = Vec::new();
    let mut current: Option<Block> = None;
    let mut last_text: Option<&str> = None;
    for line in text.lines() {
        let t = line.trim();
        match current.as_mut() {
            None => {
                if let Some(info) = t.strip_prefix("```") {
                    current = Some(Block {
                        info: info.trim(),
                        body: Vec::new(),
                        preceding: last_text,
                    });
                } else if !t.is_empty() {
                    last_text = Some(t);
                }
            }
            Some(b) => {
                if t == "```" {
                    blocks.push(current.take().unwrap());
                    last_text = None;
                } else {
                    b.body.push(line);
                }
            }
        }
    }
    blocks.extend(current);
    blocks
}

fn tags_for(kind: PlanKind) -> &'static [&'static str] {
    match kind {
        PlanKind::Repair => &["error_suggestion"],
        PlanKind::Correction => &["functionality_suggestion"],
        PlanKind::Acceleration => &["json", "acceleration_plan"],
    }
}

/// Parse the last fenced block tagged for `kind`.
pub fn parse_plan(response: &str, kind: PlanKind) -> Result<AgentPlan, PlanError> {
    let tag = kind.block_tag().to_string();
    let tags = tags_for(kind);
    let block = fenced_blocks(response)
        .into_iter()
        .rev()
        .find(|b| tags.iter().any(|t| b.info.eq_ignore_ascii_case(t)))
        .ok_or_else(|| PlanError::NoBlockFound { tag: tag.clone() })?;
    let raw = block.body.join("\n");
    let malformed = |reason: String| PlanError::MalformedPlan {
        tag: tag.clone(),
        reason,
        raw: raw.clone(),
    };
    let value = lenient_json(&raw).map_err(malformed)?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("expected a JSON object".into()))?;
    match kind {
        PlanKind::Repair => {
            let local = obj.get("local_error_suggestion");
            let cross = obj.get("crossfile_error_suggestion");
            if local.is_none() && cross.is_none() {
                return Err(malformed("no suggestion lists".into()));
            }
            let local_suggestions = string_list(local).map_err(malformed)?;
            let crossfile_suggestions = string_list(cross).map_err(malformed)?;
            if local_suggestions.is_empty() && crossfile_suggestions.is_empty() {
                return Err(malformed("suggestion lists are empty".into()));
            }
            Ok(AgentPlan::Repair {
                local_suggestions,
                crossfile_suggestions,
            })
        }
        PlanKind::Correction => {
            let mut numbered: Vec<(u64, String)> = Vec::new();
            for (k, v) in obj {
                let Some(n) = k.strip_prefix("suggestion") else {
                    continue;
                };
                let n = n.parse::<u64>().unwrap_or(u64::MAX);
                for s in string_list(Some(v)).map_err(malformed)? {
                    numbered.push((n, s));
                }
            }
            // stable: equal numbers keep document order
            numbered.sort_by_key(|(n, _)| *n);
            let suggestions: Vec<String> = numbered.into_iter().map(|(_, s)| s).collect();
            if suggestions.is_empty() {
                return Err(malformed("no non-empty suggestionN entries".into()));
            }
            Ok(AgentPlan::Correction { suggestions })
        }
        PlanKind::Acceleration => {
            let field = |names: &[&str]| -> Result<String, PlanError> {
                let v = names
                    .iter()
                    .find_map(|n| obj.get(*n))
                    .ok_or_else(|| malformed(format!("missing \"{}\"", names[0])))?;
                let list = string_list(Some(v)).map_err(malformed)?;
                match list.len() {
                    1 => Ok(list.into_iter().next().unwrap()),
                    0 => Err(malformed(format!("empty \"{}\"", names[0]))),
                    _ => Err(malformed(format!("more than one \"{}\"", names[0]))),
                }
            };
            Ok(AgentPlan::Acceleration {
                bottleneck: field(&["bottleneck"])?,
                method: field(&["optimisation method", "optimization method", "optimisation_method", "optimization_method", "method"])?,
                plan: field(&["modification plan", "modification_plan", "plan"])?,
            })
        }
    }
}

/// Strings from a string or list; blank entries dropped.
fn string_list(v: Option<&Value>) -> Result<Vec<String>, String> {
    let items: Vec<&Value> = match v {
        None | Some(Value::Null) => return Ok(Vec::new()),
        Some(Value::Array(a)) => a.iter().collect(),
        Some(other) => vec![other],
    };
    items
        .into_iter()
        .filter_map(|x| match x {
            Value::String(s) if s.trim().is_empty() => None,
            Value::String(s) => Some(Ok(s.trim().to_string())),
            Value::Number(_) | Value::Bool(_) => Some(Ok(x.to_string())),
            Value::Null => None,
            _ => Some(Err(format!("unexpected nested value {x}"))),
        })
        .collect()
}

/// Parse JSON as models tend to write it: `#` and `//` comments, trailing
/// commas, and a doubled outer brace are accepted.
pub(crate) fn lenient_json(raw: &str) -> Result<Value, String> {
    let cleaned = strip_comments_and_trailing_commas(raw);
    match serde_json::from_str::<Value>(&cleaned) {
        Ok(v) => Ok(v),
        Err(first) => {
            let t = cleaned.trim();
            if let Some(inner) = t.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
                if inner.trim_start().starts_with('{') {
                    return serde_json::from_str(inner).map_err(|e| e.to_string());
                }
            }
            Err(first.to_string())
        }
    }
}

fn strip_comments_and_trailing_commas(s: &str) -> String {
    drop_trailing_commas(&strip_comments(s))
}

/// Walk `s` outside string literals, letting `f` decide what to emit for
/// each character. `f` returns how many characters it consumed.
fn outside_strings(s: &str, mut f: impl FnMut(&[char], usize, &mut String) -> usize) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut i = 0;
    let mut in_str = false;
    while i < chars.len() {
        let c = chars[i];
        if in_str {
            out.push(c);
            if c == '\\' && i + 1 < chars.len() {
                out.push(chars[i + 1]);
                i += 2;
                continue;
            }
            in_str = c != '"';
            i += 1;
        } else if c == '"' {
            in_str = true;
            out.push(c);
            i += 1;
        } else {
            i += f(&chars, i, &mut out).max(1);
        }
    }
    out
}

fn strip_comments(s: &str) -> String {
    outside_strings(s, |chars, i, out| {
        let comment = chars[i] == '#' || (chars[i] == '/' && chars.get(i + 1) == Some(&'/'));
        if comment {
            chars[i..].iter().take_while(|c| **c != '\n').count()
        } else {
            out.push(chars[i]);
            1
        }
    })
}

fn drop_trailing_commas(s: &str) -> String {
    outside_strings(s, |chars, i, out| {
        let closes = chars[i + 1..].iter().find(|c| !c.is_whitespace());
        if chars[i] != ',' || !matches!(closes, Some('}') | Some(']')) {
            out.push(chars[i]);
        }
        1
    })
}

static FILE_NAME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[A-Za-z0-9_./\\-]+\.[A-Za-z0-9]+$").unwrap());

/// File name carried by a header line such as `CPUArgMax.cpp`,
/// `// CPUArgMax.cpp` or `CPUArgMax.cpp:`.
fn header_name(line: &str) -> Option<&str> {
    let t = line
        .trim()
        .trim_start_matches("//")
        .trim_start_matches('#')
        .trim()
        .trim_end_matches(':')
        .trim_matches('`')
        .trim();
    FILE_NAME.is_match(t).then_some(t)
}

fn base_name(name: &str) -> &str {
    name.rsplit(['/', '\\']).next().unwrap_or(name)
}

/// Extract one code block per target file. Each block names its file on its
/// first line (which is dropped from the source); a name on the line just
/// before the fence is accepted as a fallback.
pub fn parse_candidate(
    response: &str,
    task: &TaskSpec,
    iteration: u32,
) -> Result<KernelCandidate, CandidateParseError> {
    let mut files: IndexMap<String, String> = IndexMap::new();
    for block in fenced_blocks(response) {
        let first = block.body.iter().position(|l| !l.trim().is_empty());
        let (name, body) = match first.and_then(|i| header_name(block.body[i]).map(|n| (i, n))) {
            Some((i, n)) => (n, &block.body[i + 1..]),
            None => match block.preceding.and_then(header_name) {
                Some(n) => (n, &block.body[..]),
                None => {
                    log::debug!("ignoring unnamed ```{} block", block.info);
                    continue;
                }
            },
        };
        let name = base_name(name);
        let Some(target) = task.target_file_names.iter().find(|t| t.as_str() == name) else {
            return Err(CandidateParseError::ExtraneousFile(name.to_string()));
        };
        let mut text = body.join("\n");
        text.push('\n');
        if files.insert(target.clone(), text).is_some() {
            log::debug!("{target} appears twice; keeping the later block");
        }
    }
    for t in &task.target_file_names {
        if !files.contains_key(t) {
            return Err(CandidateParseError::MissingFile(t.clone()));
        }
    }
    Ok(KernelCandidate::new(task, iteration, files).expect("files match targets"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Mechanism;
    use crate::workspace::testing::task;

    #[test]
    fn repair_block_with_template_quirks() {
        let r = "Analysis first.\n```error_suggestion\n{\n    {\n        \"local_error_suggestion\":[\"declare mCache\", \"return NO_ERROR\"],\n        \"crossfile_error_suggestion\":[\"match onResize signature\"],\n    }\n}\n```\nDone.";
        let p = parse_plan(r, PlanKind::Repair).unwrap();
        assert_eq!(
            p,
            AgentPlan::Repair {
                local_suggestions: vec!["declare mCache".into(), "return NO_ERROR".into()],
                crossfile_suggestions: vec!["match onResize signature".into()],
            }
        );
    }

    #[test]
    fn last_block_wins_and_prose_only_fails() {
        let r = "```functionality_suggestion\n{\"suggestion1\": \"old\"}\n```\n```functionality_suggestion\n{\"suggestion2\": \"b\", \"suggestion1\": \"a\", # more\n}\n```";
        assert_eq!(
            parse_plan(r, PlanKind::Correction).unwrap(),
            AgentPlan::Correction { suggestions: vec!["a".into(), "b".into()] }
        );
        assert!(matches!(parse_plan("just prose", PlanKind::Correction), Err(PlanError::NoBlockFound { .. })));
    }

    #[test]
    fn acceleration_fields() {
        let r = "```json\n{\"bottleneck\": \"scalar loop\", \"optimisation method\": \"NEON\", \"modification plan\": \"vectorise by 4\"}\n```";
        assert_eq!(
            parse_plan(r, PlanKind::Acceleration).unwrap(),
            AgentPlan::Acceleration {
                bottleneck: "scalar loop".into(),
                method: "NEON".into(),
                plan: "vectorise by 4".into()
            }
        );
        let us = r.replace("optimisation method", "optimization method");
        assert!(parse_plan(&us, PlanKind::Acceleration).is_ok());
        let two = r.replace("\"NEON\"", "[\"NEON\", \"tiling\"]");
        assert!(matches!(parse_plan(&two, PlanKind::Acceleration), Err(PlanError::MalformedPlan { .. })));
        let missing = "```json\n{\"bottleneck\": \"x\"}\n```";
        match parse_plan(missing, PlanKind::Acceleration) {
            Err(PlanError::MalformedPlan { raw, .. }) => assert_eq!(raw, "{\"bottleneck\": \"x\"}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_json_keeps_raw() {
        let r = "```error_suggestion\n{not json\n```";
        match parse_plan(r, PlanKind::Repair) {
            Err(PlanError::MalformedPlan { raw, .. }) => assert_eq!(raw, "{not json"),
            other => panic!("{other:?}"),
        }
    }

    fn argmax() -> TaskSpec {
        task("argmax", Mechanism::Atomic, &["CPUArgMax.hpp", "CPUArgMax.cpp"])
    }

    #[test]
    fn candidate_two_files() {
        let r = "```cpp\nCPUArgMax.cpp\n#include \"CPUArgMax.hpp\"\nint x;\n```\ntext\n```cpp\n// CPUArgMax.hpp\n#pragma once\n```";
        let c = parse_candidate(r, &argmax(), 3).unwrap();
        assert_eq!(c.files.keys().collect::<Vec<_>>(), ["CPUArgMax.hpp", "CPUArgMax.cpp"]);
        assert_eq!(c.files["CPUArgMax.cpp"], "#include \"CPUArgMax.hpp\"\nint x;\n");
        assert_eq!(c.files["CPUArgMax.hpp"], "#pragma once\n");
        assert_eq!(c.iteration, 3);
    }

    #[test]
    fn candidate_errors() {
        let one = "```cpp\nCPUArgMax.hpp\n#pragma once\n```";
        assert_eq!(parse_candidate(one, &argmax(), 0).unwrap_err(), CandidateParseError::MissingFile("CPUArgMax.cpp".into()));
        let extra = "```cpp\nCPUArgMin.cpp\nint y;\n```";
        assert_eq!(parse_candidate(extra, &argmax(), 0).unwrap_err(), CandidateParseError::ExtraneousFile("CPUArgMin.cpp".into()));
    }

    #[test]
    fn name_before_fence_fallback() {
        let r = "CPUArgMax.hpp:\n```\n#pragma once\n```\nCPUArgMax.cpp:\n```\nint z;\n```";
        let c = parse_candidate(r, &argmax(), 0).unwrap();
        assert_eq!(c.files["CPUArgMax.cpp"], "int z;\n");
    }
}
