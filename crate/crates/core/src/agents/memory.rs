//! Reflective memory: past plans and their outcomes, optionally persisted as
//! JSON lines so later episodes can learn from earlier ones.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::HistoryEntry;
use crate::results::ResultsError;
use crate::scalar::Scalar;
use crate::task::OperatorCategory;

/// Entries returned by [`ReflectiveMemory::similar`].
pub const SIMILAR_LIMIT: usize = 10;

#[derive(Debug, Clone, Default)]
pub struct ReflectiveMemory<T> {
    entries: Vec<HistoryEntry<T>>,
    file: Option<PathBuf>,
}

impl<T: Scalar> ReflectiveMemory<T> {
    pub fn in_memory() -> Self {
        ReflectiveMemory {
            entries: Vec::new(),
            file: None,
        }
    }

    /// Load existing entries from `path` (if present) and append new ones
    /// to it.
    pub fn open(path: &Path) -> Result<Self, ResultsError> {
        let mut entries = Vec::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|source| ResultsError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let e = serde_json::from_str(line).map_err(|source| ResultsError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    source,
                })?;
                entries.push(e);
            }
        }
        Ok(ReflectiveMemory {
            entries,
            file: Some(path.to_path_buf()),
        })
    }

    pub fn entries(&self) -> &[HistoryEntry<T>] {
        &self.entries
    }

    pub fn record(&mut self, entry: HistoryEntry<T>) -> Result<(), ResultsError> {
        if let Some(path) = &self.file {
            let io = |source| ResultsError::Io {
                path: path.clone(),
                source,
            };
            let mut line = serde_json::to_string(&entry).expect("history entry serializes");
            line.push('\n');
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| f.write_all(line.as_bytes()))
                .map_err(io)?;
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Most recent entries for operators in `category`, oldest first.
    pub fn similar(&self, category: OperatorCategory) -> Vec<HistoryEntry<T>> {
        let mut v: Vec<HistoryEntry<T>> = self
            .entries
            .iter()
            .rev()
            .filter(|e| e.category == category)
            .take(SIMILAR_LIMIT)
            .cloned()
            .collect();
        v.reverse();
        v
    }
}
