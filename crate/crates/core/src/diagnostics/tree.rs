use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    File,
    Dir,
    /// Stands in for the contents of a directory beyond the depth limit.
    Elided,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoNode {
    pub name: String,
    pub kind: NodeKind,
    pub children: Vec<RepoNode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoTree {
    pub root: PathBuf,
    pub node: RepoNode,
}

impl RepoTree {
    /// Indented listing, directories suffixed with `/`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        render_node(&self.node, 0, &mut out);
        out
    }

    pub fn file_count(&self) -> usize {
        fn count(n: &RepoNode) -> usize {
            match n.kind {
                NodeKind::File => 1,
                _ => n.children.iter().map(count).sum(),
            }
        }
        count(&self.node)
    }
}

fn render_node(node: &RepoNode, depth: usize, out: &mut String) {
    let suffix = if node.kind == NodeKind::Dir { "/" } else { "" };
    let _ = writeln!(out, "{}{}{}", "  ".repeat(depth), node.name, suffix);
    for child in &node.children {
        render_node(child, depth + 1, out);
    }
}

/// Hierarchical view of `root`. Children sort lexicographically; hidden
/// entries are skipped; directories at `max_depth` are not expanded.
/// With a non-empty `include_exts` (e.g. `".cpp"`), only matching files are
/// listed and directories left empty by the filter are pruned.
pub fn build_repo_tree<S: AsRef<str>>(
    root: &Path,
    max_depth: usize,
    include_exts: &[S],
) -> io::Result<RepoTree> {
    if !root.is_dir() {
        return Err(io::Error::new(
            io::ErrorKind::NotFound,
            format!("{} is not a directory", root.display()),
        ));
    }
    let exts: Vec<String> = include_exts
        .iter()
        .map(|e| e.as_ref().trim_start_matches('.').to_ascii_lowercase())
        .collect();
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| root.display().to_string());
    let children = walk(root, 1, max_depth.max(1), &exts)?;
    Ok(RepoTree {
        root: root.to_path_buf(),
        node: RepoNode {
            name,
            kind: NodeKind::Dir,
            children,
        },
    })
}

fn walk(dir: &Path, depth: usize, max_depth: usize, exts: &[String]) -> io::Result<Vec<RepoNode>> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    let mut nodes = Vec::new();
    for entry in entries {
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        // file_type() does not follow links, so links list as files.
        let ft = entry.file_type()?;
        if ft.is_dir() {
            if depth >= max_depth {
                let has_entries = fs::read_dir(entry.path())?.next().is_some();
                nodes.push(RepoNode {
                    name,
                    kind: NodeKind::Dir,
                    children: if has_entries {
                        vec![RepoNode {
                            name: "...".into(),
                            kind: NodeKind::Elided,
                            children: Vec::new(),
                        }]
                    } else {
                        Vec::new()
                    },
                });
                continue;
            }
            let children = walk(&entry.path(), depth + 1, max_depth, exts)?;
            if !exts.is_empty() && children.is_empty() {
                continue;
            }
            nodes.push(RepoNode {
                name,
                kind: NodeKind::Dir,
                children,
            });
        } else {
            let keep = exts.is_empty()
                || Path::new(&name)
                    .extension()
                    .map(|e| exts.contains(&e.to_string_lossy().to_ascii_lowercase()))
                    .unwrap_or(false);
            if keep {
                nodes.push(RepoNode {
                    name,
                    kind: NodeKind::File,
                    children: Vec::new(),
                });
            }
        }
    }
    Ok(nodes)
}
