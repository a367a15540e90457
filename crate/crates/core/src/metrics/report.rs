//! Report files: a JSON document plus an aligned text table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{FastP, MetricsReport};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn row<T: Scalar>(out: &mut String, label: &str, n: usize, csr: T, fcr: T, fast: &[FastP<T>]) {
    let _ = write!(out, "{label:<14} {n:>5} {:>8.1} {:>8.1}", csr.to_f64_lossy(), fcr.to_f64_lossy());
    for f in fast {
        let _ = write!(out, " {:>9.1}", f.pct.to_f64_lossy());
    }
    out.push('\n');
}

/// Overall row followed by one row per category; columns are task count,
/// CSR, FCR, then one `fast_p` column per threshold.
pub fn render_table<T: Scalar>(report: &MetricsReport<T>) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<14} {:>5} {:>8} {:>8}", "category", "n", "CSR", "FCR");
    for f in &report.fast_p {
        let _ = write!(out, " {:>9}", format!("fast_{:?}", f.threshold.to_f64_lossy()));
    }
    out.push('\n');
    row(&mut out, "overall", report.n_tasks, report.csr_pct, report.fcr_pct, &report.fast_p);
    for (cat, m) in &report.per_category {
        row(&mut out, cat.as_str(), m.n_tasks, m.csr_pct, m.fcr_pct, &m.fast_p);
    }
    out
}

/// Write `path` (JSON) and a sibling `.txt` table. Returns the table path.
pub fn emit_report<T: Scalar>(report: &MetricsReport<T>, path: &Path) -> Result<PathBuf, ReportError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, json).map_err(io(path))?;
    let table = path.with_extension("txt");
    fs::write(&table, render_table(report)).map_err(io(&table))?;
    Ok(table)
}

pub fn load_report<T: Scalar>(path: &Path) -> Result<MetricsReport<T>, ReportError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|source| ReportError::Parse {
        path: path.to_path_buf(),
        source,
    })
}
