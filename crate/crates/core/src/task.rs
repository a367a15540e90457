//! Benchmark tasks, the operator taxonomy, and manifest loading.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

/// Manifest schema versions this build understands.
pub const SUPPORTED_SCHEMA_VERSIONS: &[&str] = &["1"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OperatorCategory {
    Unary,
    Binary,
    Trigonometry,
    Activation,
    Normalization,
    Pooling,
    Convolution,
    Matrix,
    Reduction,
    Tensor,
    Logic,
    Others,
}

impl OperatorCategory {
    pub const ALL: [OperatorCategory; 12] = [
        OperatorCategory::Unary,
        OperatorCategory::Binary,
        OperatorCategory::Trigonometry,
        OperatorCategory::Activation,
        OperatorCategory::Normalization,
        OperatorCategory::Pooling,
        OperatorCategory::Convolution,
        OperatorCategory::Matrix,
        OperatorCategory::Reduction,
        OperatorCategory::Tensor,
        OperatorCategory::Logic,
        OperatorCategory::Others,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OperatorCategory::Unary => "Unary",
            OperatorCategory::Binary => "Binary",
            OperatorCategory::Trigonometry => "Trigonometry",
            OperatorCategory::Activation => "Activation",
            OperatorCategory::Normalization => "Normalization",
            OperatorCategory::Pooling => "Pooling",
            OperatorCategory::Convolution => "Convolution",
            OperatorCategory::Matrix => "Matrix",
            OperatorCategory::Reduction => "Reduction",
            OperatorCategory::Tensor => "Tensor",
            OperatorCategory::Logic => "Logic",
            OperatorCategory::Others => "Others",
        }
    }
}

impl fmt::Display for OperatorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OperatorCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OperatorCategory::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown operator category '{s}'"))
    }
}

/// How an operator is realised inside the target framework.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mechanism {
    /// Direct numeric kernel: declaration plus implementation file.
    Atomic,
    /// Coordinate-transform description of the output.
    Geometric,
    /// Composition of operators the framework already has.
    Composite,
}

impl Mechanism {
    pub fn file_count(self) -> usize {
        match self {
            Mechanism::Atomic => 2,
            Mechanism::Geometric | Mechanism::Composite => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Atomic => "Atomic",
            Mechanism::Geometric => "Geometric",
            Mechanism::Composite => "Composite",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AttributeError {
    #[error("attribute '{0}' not set")]
    Missing(String),
    #[error("attribute '{key}' = '{value}' is not a valid {expected}")]
    Invalid {
        key: String,
        value: String,
        expected: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub operator_name: String,
    pub category: OperatorCategory,
    pub mechanism: Mechanism,
    #[serde(default, deserialize_with = "stringly_map")]
    pub attributes: BTreeMap<String, String>,
    pub reference_graph: PathBuf,
    pub reference_inputs: Vec<PathBuf>,
    pub reference_outputs: Vec<PathBuf>,
    pub target_file_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_latency_ms: Option<f64>,
    /// Short natural-language description used in prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Source of the reference model (e.g. a PyTorch module) shown to the Coder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_model: Option<PathBuf>,
}

impl TaskSpec {
    pub fn attr(&self, key: &str) -> Result<&str, AttributeError> {
        self.attributes
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| AttributeError::Missing(key.to_string()))
    }

    pub fn attr_int(&self, key: &str) -> Result<i64, AttributeError> {
        let raw = self.attr(key)?;
        raw.trim().parse().map_err(|_| invalid(key, raw, "integer"))
    }

    pub fn attr_float(&self, key: &str) -> Result<f64, AttributeError> {
        let raw = self.attr(key)?;
        raw.trim().parse().map_err(|_| invalid(key, raw, "float"))
    }

    pub fn attr_bool(&self, key: &str) -> Result<bool, AttributeError> {
        let raw = self.attr(key)?;
        match raw.trim().to_ascii_lowercase().as_str() {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(invalid(key, raw, "bool")),
        }
    }

    /// Accepts `[1, 2, 3]` or `1,2,3`.
    pub fn attr_int_list(&self, key: &str) -> Result<Vec<i64>, AttributeError> {
        let raw = self.attr(key)?;
        let inner = raw.trim().trim_start_matches('[').trim_end_matches(']');
        if inner.trim().is_empty() {
            return Ok(Vec::new());
        }
        inner
            .split(',')
            .map(|p| p.trim().parse().map_err(|_| invalid(key, raw, "integer list")))
            .collect()
    }

    fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty task id".into());
        }
        if self.operator_name.trim().is_empty() {
            return Err("empty operator_name".into());
        }
        let want = self.mechanism.file_count();
        if self.target_file_names.len() != want {
            return Err(format!(
                "{} mechanism needs {want} target file(s), found {}",
                self.mechanism,
                self.target_file_names.len()
            ));
        }
        let unique: HashSet<_> = self.target_file_names.iter().collect();
        if unique.len() != self.target_file_names.len() {
            return Err("duplicate target file name".into());
        }
        if self.reference_inputs.is_empty() {
            return Err("reference_inputs is empty".into());
        }
        if self.reference_outputs.is_empty() {
            return Err("reference_outputs is empty".into());
        }
        if let Some(ms) = self.baseline_latency_ms {
            if !(ms.is_finite() && ms > 0.0) {
                return Err(format!("baseline_latency_ms must be positive, got {ms}"));
            }
        }
        let mut paths: Vec<&PathBuf> = vec![&self.reference_graph];
        paths.extend(&self.reference_inputs);
        paths.extend(&self.reference_outputs);
        paths.extend(&self.reference_model);
        for p in paths {
            if !p.is_file() {
                return Err(format!("referenced file {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.reference_graph);
        self.reference_inputs.iter_mut().for_each(join);
        self.reference_outputs.iter_mut().for_each(join);
        if let Some(p) = self.reference_model.as_mut() {
            join(p);
        }
    }
}

fn invalid(key: &str, value: &str, expected: &'static str) -> AttributeError {
    AttributeError::Invalid {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    }
}

/// Attribute values may be written as any scalar (or a list of scalars) and
/// are kept as strings.
fn stringly_map<'de, D>(de: D) -> Result<BTreeMap<String, String>, D::Error>
where
    D: Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Str(String),
        Int(i64),
        Float(f64),
        Bool(bool),
        List(Vec<Raw>),
    }

    fn render(raw: Raw) -> String {
        match raw {
            Raw::Str(s) => s,
            Raw::Int(i) => i.to_string(),
            Raw::Float(f) => f.to_string(),
            Raw::Bool(b) => b.to_string(),
            Raw::List(items) => {
                let parts: Vec<String> = items.into_iter().map(render).collect();
                format!("[{}]", parts.join(", "))
            }
        }
    }

    let raw = BTreeMap::<String, Raw>::deserialize(de)?;
    Ok(raw.into_iter().map(|(k, v)| (k, render(v))).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: String,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
}

impl Manifest {
    pub fn task(&self, id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("reading manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing manifest {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("task '{task_id}': {reason}")]
    Validation { task_id: String, reason: String },
}

/// Load a TOML manifest. Relative paths inside it resolve against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base).map_err(|e| match e {
        ManifestError::Parse { message, .. } => ManifestError::Parse {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Manifest, ManifestError> {
    let mut manifest: Manifest = toml::from_str(text).map_err(|e| ManifestError::Parse {
        path: PathBuf::new(),
        message: e.to_string(),
    })?;
    if !SUPPORTED_SCHEMA_VERSIONS.contains(&manifest.schema_version.as_str()) {
        return Err(ManifestError::Validation {
            task_id: String::new(),
            reason: format!("unsupported schema_version '{}'", manifest.schema_version),
        });
    }
    let mut seen = HashSet::new();
    for task in &mut manifest.tasks {
        if !seen.insert(task.id.clone()) {
            return Err(ManifestError::Validation {
                task_id: task.id.clone(),
                reason: "duplicate task id".into(),
            });
        }
        task.resolve_paths(base);
        task.validate().map_err(|reason| ManifestError::Validation {
            task_id: task.id.clone(),
            reason,
        })?;
    }
    Ok(manifest)
}

/// Task count per category; every category is present, possibly with zero.
pub fn category_histogram(manifest: &Manifest) -> BTreeMap<OperatorCategory, usize> {
    let mut hist: BTreeMap<_, _> = OperatorCategory::ALL.iter().map(|&c| (c, 0)).collect();
    for task in &manifest.tasks {
        *hist.entry(task.category).or_default() += 1;
    }
    hist
}
