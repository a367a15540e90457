//! Append-only JSON-lines log of evaluation records.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::EvaluationResult;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordSource {
    Eval,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ResultRecord<T> {
    pub source: RecordSource,
    /// Distinguishes agent episodes or eval invocations sharing a file.
    pub run_id: String,
    pub result: EvaluationResult<T>,
    /// Free-form extras (plan, stage log, history entry).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
}

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone)]
pub struct ResultsFile {
    path: PathBuf,
}

impl ResultsFile {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        ResultsFile { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Append one record with a single write so concurrent appenders do not
    /// interleave within a line.
    pub fn append<T: Scalar>(&self, rec: &ResultRecord<T>) -> Result<(), ResultsError> {
        let io = |source| ResultsError::Io {
            path: self.path.clone(),
            source,
        };
        if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut line = serde_json::to_string(rec).expect("record serializes");
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path).map_err(io)?;
        f.write_all(line.as_bytes()).map_err(io)
    }

    /// All records in file order. A truncated final line (from a crashed
    /// writer) is skipped with a warning; malformed lines elsewhere are errors.
    pub fn read_all<T: Scalar>(&self) -> Result<Vec<ResultRecord<T>>, ResultsError> {
        let text = fs::read_to_string(&self.path).map_err(|source| ResultsError::Io {
            path: self.path.clone(),
            source,
        })?;
        let complete = text.ends_with('\n');
        let lines: Vec<&str> = text.lines().collect();
        let mut out = Vec::new();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(r) => out.push(r),
                Err(e) if i + 1 == lines.len() && !complete => {
                    log::warn!("{}: ignoring truncated last line: {e}", self.path.display());
                }
                Err(source) => {
                    return Err(ResultsError::Parse {
                        path: self.path.clone(),
                        line: i + 1,
                        source,
                    })
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::OperatorCategory;

    fn rec(task: &str) -> ResultRecord<f64> {
        ResultRecord {
            source: RecordSource::Eval,
            run_id: "r1".into(),
            result: EvaluationResult::new(task, OperatorCategory::Matrix, 0),
            detail: None,
        }
    }

    #[test]
    fn append_and_read() {
        let d = tempfile::tempdir().unwrap();
        let f = ResultsFile::new(d.path().join("sub/results.jsonl"));
        f.append(&rec("a")).unwrap();
        f.append(&rec("b")).unwrap();
        let all: Vec<ResultRecord<f64>> = f.read_all().unwrap();
        assert_eq!(all, vec![rec("a"), rec("b")]);
    }

    #[test]
    fn truncated_tail_tolerated_but_not_middle() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("r.jsonl");
        let good = serde_json::to_string(&rec("a")).unwrap();
        fs::write(&p, format!("{good}\n{{\"source\":\"ev")).unwrap();
        let f = ResultsFile::new(&p);
        assert_eq!(f.read_all::<f64>().unwrap().len(), 1);
        fs::write(&p, format!("{{oops\n{good}\n")).unwrap();
        assert!(matches!(f.read_all::<f64>(), Err(ResultsError::Parse { line: 1, .. })));
    }
}
