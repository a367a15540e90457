//! Compiler log → structured error records.
//!
//! Grammar: `path:line[:col]: severity: message`, as printed by gcc and clang.
//! Warnings are skipped. `note:` lines following an error are folded into its
//! message. Linker failures and location-less tool errors are kept aside as
//! "other" errors.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use std::sync::LazyLock;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Classification, ErrorRecord};

static ANSI: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\x1b\[[0-9;]*[A-Za-z]").unwrap());

static LOCATED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^(?P<file>[^\s:][^:]*?):(?P<line>\d+):(?:(?P<col>\d+):)?\s*(?P<sev>fatal error|error|warning|note|remark):\s?(?P<msg>.*)$",
    )
    .unwrap()
});

static BARE_NOTE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*note:\s?(?P<msg>.*)$").unwrap());

static LINKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"undefined reference to|undefined symbol").unwrap());

static TOOL_ERROR: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(?P<tool>[^\s:]+):\s*(?:fatal error|error):\s?(?P<msg>.*)$").unwrap()
});

static ANY_ERROR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\berror:").unwrap());

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    /// One record per distinct located error, in log order.
    pub records: Vec<ErrorRecord>,
    /// Linker and location-less errors, verbatim.
    pub other_errors: Vec<String>,
    /// Error-looking lines that fit no rule.
    pub dropped: usize,
}

impl Extraction {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty() && self.other_errors.is_empty()
    }
}

enum Last {
    Error(usize),
    Skipped,
    Nothing,
}

/// Parse `log_text`; `candidate_files` are matched by file name only.
pub fn extract_errors<S: AsRef<str>>(log_text: &str, candidate_files: &[S]) -> Extraction {
    let candidates: HashSet<&str> = candidate_files
        .iter()
        .map(|s| file_name(s.as_ref()))
        .collect();
    let mut out = Extraction::default();
    let mut seen: HashSet<(PathBuf, u32, Option<u32>, String)> = HashSet::new();
    let mut last = Last::Nothing;

    for raw in log_text.lines() {
        let clean = ANSI.replace_all(raw, "");
        let line = clean.trim_end();

        if LINKER.is_match(line) {
            out.other_errors.push(line.trim().to_string());
            last = Last::Skipped;
            continue;
        }

        if let Some(c) = LOCATED.captures(line) {
            let file = c["file"].trim();
            let msg = c["msg"].trim();
            let sev = &c["sev"];
            let lineno: u32 = c["line"].parse().unwrap_or(0);
            let col: Option<u32> = c.name("col").and_then(|m| m.as_str().parse().ok());
            match sev {
                "note" | "remark" => {
                    if let Last::Error(idx) = last {
                        let rec = &mut out.records[idx];
                        rec.message.push_str(&format!("\nnote: {file}:{lineno}: {msg}"));
                    }
                }
                "warning" => last = Last::Skipped,
                _ => {
                    if lineno == 0 || col == Some(0) {
                        out.dropped += 1;
                        last = Last::Skipped;
                        continue;
                    }
                    let key = (PathBuf::from(file), lineno, col, msg.to_string());
                    if !seen.insert(key) {
                        last = Last::Skipped;
                        continue;
                    }
                    let classification = if candidates.contains(file_name(file)) {
                        Classification::Local
                    } else {
                        Classification::CrossFile
                    };
                    out.records.push(ErrorRecord {
                        file: PathBuf::from(file),
                        line: lineno,
                        column: col,
                        message: msg.to_string(),
                        context: String::new(),
                        classification,
                    });
                    last = Last::Error(out.records.len() - 1);
                }
            }
            continue;
        }

        if let Some(c) = BARE_NOTE.captures(line) {
            if let Last::Error(idx) = last {
                out.records[idx]
                    .message
                    .push_str(&format!("\nnote: {}", c["msg"].trim()));
            }
            continue;
        }

        if TOOL_ERROR.is_match(line) {
            out.other_errors.push(line.trim().to_string());
            last = Last::Skipped;
            continue;
        }

        if ANY_ERROR.is_match(line) {
            out.dropped += 1;
        }
    }
    out
}

fn file_name(path: &str) -> &str {
    Path::new(path)
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CANDS: [&str; 2] = ["CPUArgMax.cpp", "CPUArgMax.hpp"];

    #[test]
    fn local_error() {
        let log = "src/cpu/CPUArgMax.cpp:42:10: error: use of undeclared identifier 'mCache'";
        let ex = extract_errors(log, &CANDS);
        assert_eq!(ex.records.len(), 1);
        let r = &ex.records[0];
        assert_eq!(r.file, PathBuf::from("src/cpu/CPUArgMax.cpp"));
        assert_eq!(r.line, 42);
        assert_eq!(r.column, Some(10));
        assert_eq!(r.message, "use of undeclared identifier 'mCache'");
        assert_eq!(r.classification, Classification::Local);
    }

    #[test]
    fn cross_file_error() {
        let log = "core/Backend.hpp:42:10: error: use of undeclared identifier 'mCache'";
        let ex = extract_errors(log, &CANDS);
        assert_eq!(ex.records[0].classification, Classification::CrossFile);
    }

    #[test]
    fn empty_log() {
        let ex = extract_errors("", &CANDS);
        assert!(ex.is_empty());
        assert_eq!(ex.dropped, 0);
    }

    #[test]
    fn warnings_skipped_notes_folded_duplicates_merged() {
        let log = "\
In file included from /w/ops/CPUArgMax.cpp:1:
/w/ops/CPUArgMax.hpp:7:3: warning: unused variable 'x' [-Wunused-variable]
/w/ops/CPUArgMax.hpp:7:3: note: declared here
/w/ops/CPUArgMax.cpp:20:5: error: no matching function for call to 'foo'
   20 |     foo(1, 2);
      |     ^~~
/w/core/Backend.hpp:11:10: note: candidate function not viable
/w/ops/CPUArgMax.cpp:20:5: error: no matching function for call to 'foo'
make[2]: *** [CMakeFiles/x.dir/build.make:76: ops/CPUArgMax.o] Error 1
";
        let ex = extract_errors(log, &CANDS);
        assert_eq!(ex.records.len(), 1);
        assert_eq!(
            ex.records[0].message,
            "no matching function for call to 'foo'\nnote: /w/core/Backend.hpp:11: candidate function not viable"
        );
        assert!(ex.other_errors.is_empty());
    }

    #[test]
    fn linker_and_tool_errors_go_to_other() {
        let log = "\
/usr/bin/ld: CPUArgMax.o: in function `f': CPUArgMax.cpp:(.text+0x1c): undefined reference to `bar()'
ld.lld: error: undefined symbol: baz
collect2: error: ld returned 1 exit status
";
        let ex = extract_errors(log, &CANDS);
        assert!(ex.records.is_empty());
        assert_eq!(ex.other_errors.len(), 3);
    }

    #[test]
    fn colour_codes_and_fatal_errors() {
        let log = "\x1b[1mops/Relu.cpp:3:10: \x1b[0m\x1b[0;1;31mfatal error: \x1b[0m'missing.h' file not found";
        let ex = extract_errors(log, &["Relu.cpp"]);
        assert_eq!(ex.records.len(), 1);
        assert_eq!(ex.records[0].message, "'missing.h' file not found");
        assert_eq!(ex.records[0].classification, Classification::Local);
    }

    #[test]
    fn line_without_column_and_dropped_tally() {
        let log = "ops/Relu.cpp:9: error: expected ';'\nops/Relu.cpp:0:1: error: bogus\n\
                   weird error: thing\ncc1plus: error: unrecognized option '-mfoo'\n";
        let ex = extract_errors(log, &["Relu.cpp"]);
        assert_eq!(ex.records.len(), 1);
        assert_eq!(ex.records[0].column, None);
        assert_eq!(ex.dropped, 2);
        assert_eq!(ex.other_errors, vec!["cc1plus: error: unrecognized option '-mfoo'".to_string()]);
    }
}
