//! The grouped error document embedded in repair prompts.
//!
//! Key names (including the `erorr` spellings) follow the schema the repair
//! prompt was designed around, so they are kept byte-for-byte.

use std::path::PathBuf;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Classification, ErrorRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorEntry {
    #[serde(rename = "erorr_file")]
    pub file: PathBuf,
    #[serde(rename = "error_line")]
    pub line: u32,
    #[serde(rename = "error_message")]
    pub message: String,
    #[serde(rename = "error_context")]
    pub context: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisDocument {
    pub opname: String,
    pub local_error: IndexMap<String, ErrorEntry>,
    pub crossfile_error: IndexMap<String, ErrorEntry>,
    pub other_error: String,
}

impl DiagnosisDocument {
    pub fn is_empty(&self) -> bool {
        self.local_error.is_empty() && self.crossfile_error.is_empty() && self.other_error.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("diagnosis document serializes")
    }

    pub fn entries(&self) -> impl Iterator<Item = &ErrorEntry> {
        self.local_error.values().chain(self.crossfile_error.values())
    }
}

/// Split records into local and cross-file sections, numbered in log order.
pub fn group_errors(opname: &str, records: &[ErrorRecord], other_errors: &[String]) -> DiagnosisDocument {
    let mut local = IndexMap::new();
    let mut cross = IndexMap::new();
    for rec in records {
        let section = match rec.classification {
            Classification::Local => &mut local,
            Classification::CrossFile => &mut cross,
        };
        let key = format!("erorr{}", section.len() + 1);
        section.insert(
            key,
            ErrorEntry {
                file: rec.file.clone(),
                line: rec.line,
                message: rec.message.clone(),
                context: rec.context.clone(),
            },
        );
    }
    DiagnosisDocument {
        opname: opname.to_string(),
        local_error: local,
        crossfile_error: cross,
        other_error: other_errors.join("\n"),
    }
}
