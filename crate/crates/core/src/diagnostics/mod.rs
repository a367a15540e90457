//! Repository-aware tooling for the Debugger: codebase tree, compiler-log
//! error extraction, enclosing-scope context, and the grouped diagnosis
//! document handed to the model.

mod context;
mod document;
mod compiler_log;
mod tree;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use context::{enclosing_scope, extract_context, ContextError, Scope, ScopeKind, FALLBACK_WINDOW};
pub use document::{group_errors, DiagnosisDocument, ErrorEntry};
pub use compiler_log::{extract_errors, Extraction};
pub use tree::{build_repo_tree, NodeKind, RepoNode, RepoTree};

/// Downstream consumers see at most this many records per build.
pub const MAX_RECORDS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Classification {
    /// Inside one of the injected candidate files.
    Local,
    /// Anywhere else in the framework tree.
    CrossFile,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub file: PathBuf,
    pub line: u32,
    pub column: Option<u32>,
    pub message: String,
    pub context: String,
    pub classification: Classification,
}

/// Fill `context` for each record from sources under `root`.
///
/// Paths are tried as given, then relative to `root`, then by file name
/// anywhere in the tree. Records whose file cannot be found keep an empty
/// context.
pub fn attach_context(records: &mut [ErrorRecord], root: &Path) {
    for rec in records {
        let Some(path) = locate(&rec.file, root) else {
            continue;
        };
        if let Ok(ctx) = extract_context(&path, rec.line) {
            rec.context = ctx;
        }
    }
}

fn locate(file: &Path, root: &Path) -> Option<PathBuf> {
    if file.is_absolute() && file.is_file() {
        return Some(file.to_path_buf());
    }
    let joined = root.join(file);
    if joined.is_file() {
        return Some(joined);
    }
    let name = file.file_name()?;
    walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| e.depth() == 0 || !e.file_name().to_string_lossy().starts_with('.'))
        .filter_map(Result::ok)
        .find(|e| e.file_type().is_file() && e.file_name() == name)
        .map(|e| e.into_path())
}
