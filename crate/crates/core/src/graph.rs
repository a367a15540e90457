//! Operator-graph descriptions and their semantic diff.
//!
//! Documents look like:
//!
//! ```json
//! {"nodes": [{"op_type": "ArgMax", "name": "argmax_0",
//!             "attributes": {"axis": 1, "keep_dims": 0},
//!             "input_shapes": [[2, 3]], "output_shapes": [[2]],
//!             "dtypes": ["float32"]}]}
//! ```
//!
//! Multi-node graphs are compared position by position, not by isomorphism.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const ABSENT: &str = "<absent>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<AttrValue>),
}

impl fmt::Display for AttrValue {
    /// Type-revealing rendering: `1`, `1.0`, `"1"`, `true`, `[1, 2]`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Bool(b) => write!(f, "{b}"),
            AttrValue::Int(i) => write!(f, "{i}"),
            AttrValue::Float(x) => write!(f, "{x:?}"),
            AttrValue::Str(s) => write!(f, "{}", Value::String(s.clone())),
            AttrValue::List(items) => {
                f.write_str("[")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str("]")
            }
        }
    }
}

pub type Shape = Vec<u64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub op_type: String,
    pub name: String,
    pub attributes: BTreeMap<String, AttrValue>,
    pub input_shapes: Vec<Shape>,
    pub output_shapes: Vec<Shape>,
    pub dtypes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDesc {
    pub nodes: Vec<GraphNode>,
}

impl GraphDesc {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MismatchKind {
    NodeType,
    Attribute,
    Shape,
    Dtype,
    Topology,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphMismatch {
    pub path: String,
    pub reference_value: String,
    pub target_value: String,
    pub severity: MismatchKind,
}

impl fmt::Display for GraphMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} {}: reference {} vs target {}",
            self.severity, self.path, self.reference_value, self.target_value
        )
    }
}

#[derive(Debug, Error)]
#[error("graph document at {path}: {reason}")]
pub struct GraphError {
    pub path: String,
    pub reason: String,
}

fn err(path: &str, reason: impl Into<String>) -> GraphError {
    GraphError {
        path: path.to_string(),
        reason: reason.into(),
    }
}

const NODE_KEYS: [&str; 6] = ["op_type", "name", "attributes", "input_shapes", "output_shapes", "dtypes"];

pub fn parse_graph(doc: &str) -> Result<GraphDesc, GraphError> {
    let root: Value = serde_json::from_str(doc).map_err(|e| err("$", e.to_string()))?;
    let obj = root.as_object().ok_or_else(|| err("$", "expected an object"))?;
    if let Some(k) = obj.keys().find(|k| k.as_str() != "nodes") {
        return Err(err(&format!("$.{k}"), "unknown key"));
    }
    let nodes = obj
        .get("nodes")
        .ok_or_else(|| err("$.nodes", "missing"))?
        .as_array()
        .ok_or_else(|| err("$.nodes", "expected an array"))?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(nodes.len());
    for (i, node) in nodes.iter().enumerate() {
        let base = format!("$.nodes[{i}]");
        let n = node.as_object().ok_or_else(|| err(&base, "expected an object"))?;
        if let Some(k) = n.keys().find(|k| !NODE_KEYS.contains(&k.as_str())) {
            return Err(err(&format!("{base}.{k}"), "unknown key"));
        }
        let string = |key: &str| -> Result<String, GraphError> {
            n.get(key)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| err(&format!("{base}.{key}"), "expected a string"))
        };
        let op_type = string("op_type")?;
        let name = string("name")?;
        if !seen.insert(name.clone()) {
            return Err(err(&format!("{base}.name"), format!("duplicate node name {name:?}")));
        }
        let mut attributes = BTreeMap::new();
        match n.get("attributes") {
            None | Some(Value::Null) => {}
            Some(Value::Object(m)) => {
                for (k, v) in m {
                    attributes.insert(k.clone(), attr_value(v, &format!("{base}.attributes.{k}"))?);
                }
            }
            Some(_) => return Err(err(&format!("{base}.attributes"), "expected an object")),
        }
        let dtypes = match n.get("dtypes") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(a)) => a
                .iter()
                .enumerate()
                .map(|(j, d)| {
                    d.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| err(&format!("{base}.dtypes[{j}]"), "expected a string"))
                })
                .collect::<Result<_, _>>()?,
            Some(_) => return Err(err(&format!("{base}.dtypes"), "expected an array")),
        };
        out.push(GraphNode {
            op_type,
            name,
            attributes,
            input_shapes: shapes(n.get("input_shapes"), &format!("{base}.input_shapes"))?,
            output_shapes: shapes(n.get("output_shapes"), &format!("{base}.output_shapes"))?,
            dtypes,
        });
    }
    Ok(GraphDesc { nodes: out })
}

fn attr_value(v: &Value, path: &str) -> Result<AttrValue, GraphError> {
    Ok(match v {
        Value::Bool(b) => AttrValue::Bool(*b),
        Value::Number(n) => match n.as_i64() {
            Some(i) => AttrValue::Int(i),
            None => AttrValue::Float(n.as_f64().ok_or_else(|| err(path, "number out of range"))?),
        },
        Value::String(s) => AttrValue::Str(s.clone()),
        Value::Array(items) => AttrValue::List(
            items
                .iter()
                .enumerate()
                .map(|(j, x)| attr_value(x, &format!("{path}[{j}]")))
                .collect::<Result<_, _>>()?,
        ),
        Value::Null | Value::Object(_) => return Err(err(path, "unsupported attribute type")),
    })
}

fn shapes(v: Option<&Value>, path: &str) -> Result<Vec<Shape>, GraphError> {
    let arr = match v {
        None | Some(Value::Null) => return Ok(Vec::new()),
        Some(Value::Array(a)) => a,
        Some(_) => return Err(err(path, "expected an array of shapes")),
    };
    arr.iter()
        .enumerate()
        .map(|(j, s)| {
            let dims = s
                .as_array()
                .ok_or_else(|| err(&format!("{path}[{j}]"), "expected an array"))?;
            dims.iter()
                .enumerate()
                .map(|(d, x)| {
                    x.as_u64()
                        .ok_or_else(|| err(&format!("{path}[{j}][{d}]"), "expected a nonnegative integer"))
                })
                .collect()
        })
        .collect()
}

fn render_shapes(s: &[Shape]) -> String {
    let parts: Vec<String> = s
        .iter()
        .map(|d| format!("[{}]", d.iter().map(u64::to_string).collect::<Vec<_>>().join(", ")))
        .collect();
    format!("[{}]", parts.join(", "))
}

fn render_strings(s: &[String]) -> String {
    Value::from(s.to_vec()).to_string()
}

/// Differences from `reference` to `target`, ordered by node index and then
/// field path. Node names are not compared.
pub fn diff_graphs(reference: &GraphDesc, target: &GraphDesc) -> Vec<GraphMismatch> {
    let mut out = Vec::new();
    if reference.nodes.len() != target.nodes.len() {
        out.push(GraphMismatch {
            path: "nodes".into(),
            reference_value: reference.nodes.len().to_string(),
            target_value: target.nodes.len().to_string(),
            severity: MismatchKind::Topology,
        });
    }
    for (i, (r, t)) in reference.nodes.iter().zip(&target.nodes).enumerate() {
        let mut node: Vec<GraphMismatch> = Vec::new();
        let mut push = |field: String, rv: String, tv: String, severity| {
            if rv != tv {
                node.push(GraphMismatch {
                    path: format!("node[{i}].{field}"),
                    reference_value: rv,
                    target_value: tv,
                    severity,
                });
            }
        };
        push("op_type".into(), r.op_type.clone(), t.op_type.clone(), MismatchKind::NodeType);
        let keys: std::collections::BTreeSet<&String> = r.attributes.keys().chain(t.attributes.keys()).collect();
        for k in keys {
            let show = |m: &BTreeMap<String, AttrValue>| m.get(k).map_or_else(|| ABSENT.to_string(), |v| v.to_string());
            push(format!("attributes.{k}"), show(&r.attributes), show(&t.attributes), MismatchKind::Attribute);
        }
        push("input_shapes".into(), render_shapes(&r.input_shapes), render_shapes(&t.input_shapes), MismatchKind::Shape);
        push("output_shapes".into(), render_shapes(&r.output_shapes), render_shapes(&t.output_shapes), MismatchKind::Shape);
        push("dtypes".into(), render_strings(&r.dtypes), render_strings(&t.dtypes), MismatchKind::Dtype);
        node.sort_by(|a, b| a.path.cmp(&b.path));
        out.extend(node);
    }
    out
}
