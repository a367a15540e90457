//! Framework checkouts with protected hot-swap injection and isolated clones.
//!
//! Originals are copied into a hidden backup directory inside the workspace
//! root before a candidate is written in place. The injection record is also
//! persisted there so a separate process (or a crashed run) can restore.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::framework::{ConfigError, FrameworkConfig, CONFIG_FILE_NAME};
use crate::task::TaskSpec;

pub const BACKUP_DIR: &str = ".kforge-backup";
const STATE_FILE: &str = "injection.json";

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("workspace {0} already has an active injection")]
    AlreadyInjected(PathBuf),
    #[error("workspace {0} has no active injection")]
    NothingInjected(PathBuf),
    #[error("cannot clone workspace {0} while an injection is active")]
    CloneOfInjected(PathBuf),
    #[error("operator '{operator}': no target for {file}")]
    TargetNotFound { operator: String, file: String },
    #[error("candidate files do not match task targets: {0}")]
    CandidateMismatch(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> WorkspaceError {
    let context = context.into();
    move |source| WorkspaceError::Io { context, source }
}

/// Lifecycle of a candidate through the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Generated,
    Compiled,
    Verified,
    Benchmarked,
    Failed,
}

#[derive(Debug, Error, PartialEq)]
#[error("illegal stage transition {from:?} -> {to:?}")]
pub struct StageError {
    pub from: Stage,
    pub to: Stage,
}

impl Stage {
    fn successor(self) -> Option<Stage> {
        match self {
            Stage::Generated => Some(Stage::Compiled),
            Stage::Compiled => Some(Stage::Verified),
            Stage::Verified => Some(Stage::Benchmarked),
            Stage::Benchmarked | Stage::Failed => None,
        }
    }

    pub fn can_advance_to(self, to: Stage) -> bool {
        (to == Stage::Failed && self != Stage::Failed) || self.successor() == Some(to)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCandidate {
    pub task_id: String,
    pub iteration: u32,
    /// file name -> source text, in the task's target order.
    pub files: IndexMap<String, String>,
    pub stage: Stage,
}

impl KernelCandidate {
    /// Build a candidate whose files are reordered to `task.target_file_names`.
    pub fn new(
        task: &TaskSpec,
        iteration: u32,
        mut files: IndexMap<String, String>,
    ) -> Result<Self, WorkspaceError> {
        if let Some(extra) = files
            .keys()
            .find(|k| !task.target_file_names.contains(k))
        {
            return Err(WorkspaceError::CandidateMismatch(format!(
                "unexpected file {extra}"
            )));
        }
        let mut ordered = IndexMap::new();
        for name in &task.target_file_names {
            let text = files.shift_remove(name).ok_or_else(|| {
                WorkspaceError::CandidateMismatch(format!("missing file {name}"))
            })?;
            ordered.insert(name.clone(), text);
        }
        Ok(Self {
            task_id: task.id.clone(),
            iteration,
            files: ordered,
            stage: Stage::Generated,
        })
    }

    /// Read `task.target_file_names` out of a directory.
    pub fn from_dir(task: &TaskSpec, iteration: u32, dir: &Path) -> Result<Self, WorkspaceError> {
        let mut files = IndexMap::new();
        for name in &task.target_file_names {
            let path = dir.join(name);
            let text = fs::read_to_string(&path).map_err(io_err(format!(
                "reading candidate file {}",
                path.display()
            )))?;
            files.insert(name.clone(), text);
        }
        Self::new(task, iteration, files)
    }

    pub fn advance(&mut self, to: Stage) -> Result<(), StageError> {
        if !self.stage.can_advance_to(to) {
            return Err(StageError {
                from: self.stage,
                to,
            });
        }
        self.stage = to;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub task_id: String,
    /// target path -> backup path, both relative to the workspace root.
    pub files: BTreeMap<PathBuf, PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
    label: String,
    config: FrameworkConfig,
    injected: Option<Injection>,
}

impl Workspace {
    /// Open a workspace using the config file found at its root.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, WorkspaceError> {
        let root = root.into();
        let config = FrameworkConfig::load(&root.join(CONFIG_FILE_NAME))?;
        let label = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::open_with(root, label, config)
    }

    pub fn open_with(
        root: impl Into<PathBuf>,
        label: impl Into<String>,
        config: FrameworkConfig,
    ) -> Result<Self, WorkspaceError> {
        let root = root.into();
        if !root.is_dir() {
            return Err(WorkspaceError::Io {
                context: format!("opening workspace {}", root.display()),
                source: io::Error::new(io::ErrorKind::NotFound, "not a directory"),
            });
        }
        let state = root.join(BACKUP_DIR).join(STATE_FILE);
        let injected = if state.is_file() {
            let text = fs::read_to_string(&state).map_err(io_err("reading injection state"))?;
            let inj = serde_json::from_str(&text).map_err(|e| WorkspaceError::Io {
                context: "parsing injection state".into(),
                source: io::Error::new(io::ErrorKind::InvalidData, e),
            })?;
            Some(inj)
        } else {
            None
        };
        Ok(Self {
            root,
            label: label.into(),
            config,
            injected,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn config(&self) -> &FrameworkConfig {
        &self.config
    }

    pub fn injected(&self) -> Option<&Injection> {
        self.injected.as_ref()
    }

    pub fn runner_path(&self) -> PathBuf {
        self.root.join(&self.config.runner.path)
    }

    /// Resolve each target file name to its relative path in the tree.
    pub fn target_paths(&self, task: &TaskSpec) -> Result<Vec<(String, PathBuf)>, WorkspaceError> {
        let locations = self.config.locations(&task.operator_name).unwrap_or(&[]);
        task.target_file_names
            .iter()
            .map(|name| {
                let rel = locations
                    .iter()
                    .find(|p| p.file_name().is_some_and(|f| f == name.as_str()))
                    .filter(|p| self.root.join(p).is_file())
                    .ok_or_else(|| WorkspaceError::TargetNotFound {
                        operator: task.operator_name.clone(),
                        file: name.clone(),
                    })?;
                Ok((name.clone(), rel.clone()))
            })
            .collect()
    }

    /// Back up the task's operator sources and write the candidate in place.
    pub fn inject(&mut self, task: &TaskSpec, cand: &KernelCandidate) -> Result<(), WorkspaceError> {
        if self.injected.is_some() || self.root.join(BACKUP_DIR).join(STATE_FILE).exists() {
            return Err(WorkspaceError::AlreadyInjected(self.root.clone()));
        }
        let names: Vec<&String> = cand.files.keys().collect();
        let wanted: Vec<&String> = task.target_file_names.iter().collect();
        let mut sorted_names = names.clone();
        let mut sorted_wanted = wanted.clone();
        sorted_names.sort();
        sorted_wanted.sort();
        if sorted_names != sorted_wanted {
            return Err(WorkspaceError::CandidateMismatch(format!(
                "candidate has {names:?}, task wants {wanted:?}"
            )));
        }
        let targets = self.target_paths(task)?;

        let backup_dir = self.root.join(BACKUP_DIR);
        fs::create_dir_all(&backup_dir).map_err(io_err("creating backup directory"))?;
        let mut record = Injection {
            task_id: task.id.clone(),
            files: BTreeMap::new(),
        };
        for (i, (name, rel)) in targets.iter().enumerate() {
            let backup_rel = Path::new(BACKUP_DIR).join(format!("{i}_{name}"));
            fs::copy(self.root.join(rel), self.root.join(&backup_rel))
                .map_err(io_err(format!("backing up {}", rel.display())))?;
            record.files.insert(rel.clone(), backup_rel);
        }
        write_atomic(
            &backup_dir.join(STATE_FILE),
            serde_json::to_string_pretty(&record)
                .expect("injection record serializes")
                .as_bytes(),
        )?;
        self.injected = Some(record);

        for (name, rel) in &targets {
            if let Err(e) = fs::write(self.root.join(rel), &cand.files[name]) {
                // Put back whatever was already overwritten.
                let _ = self.restore();
                return Err(io_err(format!("writing {}", rel.display()))(e));
            }
        }
        Ok(())
    }

    /// Move backups back in place and drop the injection record.
    pub fn restore(&mut self) -> Result<(), WorkspaceError> {
        let Some(record) = self.injected.clone() else {
            return Err(WorkspaceError::NothingInjected(self.root.clone()));
        };
        let now = SystemTime::now();
        for (target, backup) in &record.files {
            let dst = self.root.join(target);
            fs::rename(self.root.join(backup), &dst)
                .map_err(io_err(format!("restoring {}", target.display())))?;
            // Restored originals must look newer than objects built from the candidate.
            if let Ok(f) = fs::File::options().write(true).open(&dst) {
                let _ = f.set_modified(now);
            }
        }
        fs::remove_dir_all(self.root.join(BACKUP_DIR)).map_err(io_err("removing backup directory"))?;
        self.injected = None;
        Ok(())
    }

    /// Full copy of the tree as a sibling directory named `<root>-<label>`,
    /// suffixed with a counter if that name is taken.
    pub fn clone_workspace(&self, label: &str) -> Result<Workspace, WorkspaceError> {
        let parent = self.root.parent().unwrap_or(Path::new("."));
        let stem = self
            .root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "workspace".into());
        self.clone_into(parent, &format!("{stem}-{label}"), label)
    }

    pub fn clone_into(&self, parent: &Path, dir_name: &str, label: &str) -> Result<Workspace, WorkspaceError> {
        if self.injected.is_some() {
            return Err(WorkspaceError::CloneOfInjected(self.root.clone()));
        }
        fs::create_dir_all(parent).map_err(io_err("creating clone parent"))?;
        let mut dest = parent.join(dir_name);
        let mut n = 2;
        // create_dir (not _all) reserves the name atomically against concurrent clones.
        loop {
            match fs::create_dir(&dest) {
                Ok(()) => break,
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    dest = parent.join(format!("{dir_name}-{n}"));
                    n += 1;
                }
                Err(e) => return Err(io_err("creating clone root")(e)),
            }
        }
        copy_tree(&self.root, &dest)?;
        let label = dest
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| label.to_string());
        Workspace::open_with(dest, label, self.config.clone())
    }

    /// Content hash of the source tree, excluding configured build outputs.
    pub fn tree_hash(&self) -> Result<String, WorkspaceError> {
        tree_hash(&self.root, &self.config.build.output_dirs)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), WorkspaceError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err("writing injection state"))?;
    f.write_all(bytes).map_err(io_err("writing injection state"))?;
    f.sync_all().map_err(io_err("syncing injection state"))?;
    fs::rename(&tmp, path).map_err(io_err("committing injection state"))
}

fn copy_tree(src: &Path, dest: &Path) -> Result<(), WorkspaceError> {
    for entry in WalkDir::new(src).min_depth(1).follow_links(false) {
        let entry = entry.map_err(|e| WorkspaceError::Io {
            context: format!("walking {}", src.display()),
            source: e.into(),
        })?;
        let rel = entry.path().strip_prefix(src).expect("walk stays under root");
        let target = dest.join(rel);
        let ft = entry.file_type();
        if ft.is_dir() {
            fs::create_dir_all(&target).map_err(io_err(format!("creating {}", target.display())))?;
        } else if ft.is_symlink() {
            let link = fs::read_link(entry.path()).map_err(io_err("reading symlink"))?;
            std::os::unix::fs::symlink(link, &target).map_err(io_err("creating symlink"))?;
        } else {
            fs::copy(entry.path(), &target)
                .map_err(io_err(format!("copying {}", rel.display())))?;
        }
    }
    Ok(())
}

/// SHA-256 over (relative path, kind, mode, content) of every entry under
/// `root`, in sorted order. Paths starting with any of `exclude` are skipped.
pub fn tree_hash(root: &Path, exclude: &[PathBuf]) -> Result<String, WorkspaceError> {
    use std::os::unix::fs::PermissionsExt;

    let mut hasher = Sha256::new();
    let walker = WalkDir::new(root)
        .min_depth(1)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| {
            let rel = e.path().strip_prefix(root).unwrap_or(e.path());
            !exclude.iter().any(|x| rel.starts_with(x))
        });
    for entry in walker {
        let entry = entry.map_err(|e| WorkspaceError::Io {
            context: format!("hashing {}", root.display()),
            source: e.into(),
        })?;
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        let ft = entry.file_type();
        if ft.is_dir() {
            hasher.update(b"d");
        } else if ft.is_symlink() {
            hasher.update(b"l");
            let link = fs::read_link(entry.path()).map_err(io_err("reading symlink"))?;
            hasher.update(link.to_string_lossy().as_bytes());
        } else {
            let meta = entry.metadata().map_err(|e| WorkspaceError::Io {
                context: "stat".into(),
                source: e.into(),
            })?;
            hasher.update(b"f");
            hasher.update((meta.permissions().mode() & 0o777).to_le_bytes());
            let bytes = fs::read(entry.path()).map_err(io_err(format!("reading {}", rel.display())))?;
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(&bytes);
        }
        hasher.update([0xff]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use crate::framework::{BuildRecipe, RunnerConfig};
    use crate::task::{Mechanism, OperatorCategory};

    pub fn config() -> FrameworkConfig {
        FrameworkConfig {
            name: "fixture".into(),
            build: BuildRecipe {
                marker: "build.sh".into(),
                full: "sh build.sh full".into(),
                incremental: "sh build.sh incremental".into(),
                jobs: 1,
                timeout_s: 600.0,
                env_passthrough: vec!["PATH".into()],
                output_dirs: vec!["build".into()],
            },
            runner: RunnerConfig {
                path: "runner.sh".into(),
            },
            operators: [
                ("relu".to_string(), vec![PathBuf::from("ops/Relu.cpp")]),
                (
                    "argmax".to_string(),
                    vec![
                        PathBuf::from("ops/CPUArgMax.hpp"),
                        PathBuf::from("ops/CPUArgMax.cpp"),
                    ],
                ),
                ("ghost".to_string(), vec![PathBuf::from("ops/Ghost.cpp")]),
            ]
            .into_iter()
            .collect(),
        }
    }

    pub fn tree() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("fw");
        fs::create_dir_all(root.join("ops")).unwrap();
        fs::create_dir_all(root.join("core")).unwrap();
        fs::write(root.join("ops/Relu.cpp"), "// relu original\n").unwrap();
        fs::write(root.join("ops/CPUArgMax.hpp"), "// argmax hpp\n").unwrap();
        fs::write(root.join("ops/CPUArgMax.cpp"), "// argmax cpp\n").unwrap();
        fs::write(root.join("core/Backend.hpp"), "struct Backend {};\n").unwrap();
        fs::write(root.join("build.sh"), "exit 0\n").unwrap();
        dir
    }

    pub fn task(op: &str, mechanism: Mechanism, files: &[&str]) -> TaskSpec {
        TaskSpec {
            id: format!("{op}_task"),
            operator_name: op.into(),
            category: OperatorCategory::Activation,
            mechanism,
            attributes: BTreeMap::new(),
            reference_graph: "g.json".into(),
            reference_inputs: vec!["in.tensor".into()],
            reference_outputs: vec!["out.tensor".into()],
            target_file_names: files.iter().map(|s| s.to_string()).collect(),
            baseline_latency_ms: None,
            description: None,
            reference_model: None,
        }
    }

    pub fn candidate(task: &TaskSpec, body: &str) -> KernelCandidate {
        let files = task
            .target_file_names
            .iter()
            .map(|n| (n.clone(), format!("// {n}\n{body}\n")))
            .collect();
        KernelCandidate::new(task, 0, files).unwrap()
    }
}
