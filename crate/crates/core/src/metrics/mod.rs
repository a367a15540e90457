//! Per-candidate evaluation records, best-of-K selection, and aggregate
//! success and speedup rates.

mod report;
mod reward;

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::ErrorRecord;
use crate::scalar::{percent, round_to, Scalar};
use crate::task::OperatorCategory;
use crate::workspace::Stage;

pub use report::{emit_report, load_report, render_table, ReportError};
pub use reward::{grpo_reward, RewardError, COMPILE_REWARD, CORRECT_REWARD};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EvaluationResult<T> {
    pub task_id: String,
    pub category: OperatorCategory,
    /// Position within the task's candidate sequence; breaks ties.
    pub iteration: u32,
    pub stage: Stage,
    pub compiled: bool,
    pub correct: bool,
    pub t_generated_ms: Option<T>,
    pub t_baseline_ms: Option<T>,
    pub speedup: Option<T>,
    pub max_abs_diff: Option<T>,
    pub errors: Vec<ErrorRecord>,
    /// Infrastructure problem that stopped evaluation early, if any.
    pub infra_error: Option<String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty result list")]
    EmptyList,
    #[error("results mix tasks {0} and {1}")]
    MixedTasks(String, String),
    #[error("task {0} appears more than once")]
    DuplicateTask(String),
    #[error("result for {task_id} is inconsistent: {reason}")]
    Inconsistent { task_id: String, reason: String },
}

impl<T: Scalar> EvaluationResult<T> {
    pub fn new(task_id: impl Into<String>, category: OperatorCategory, iteration: u32) -> Self {
        EvaluationResult {
            task_id: task_id.into(),
            category,
            iteration,
            stage: Stage::Generated,
            compiled: false,
            correct: false,
            t_generated_ms: None,
            t_baseline_ms: None,
            speedup: None,
            max_abs_diff: None,
            errors: Vec::new(),
            infra_error: None,
        }
    }

    /// Check the implications between indicator fields.
    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |reason: &str| {
            Err(MetricsError::Inconsistent {
                task_id: self.task_id.clone(),
                reason: reason.into(),
            })
        };
        if self.correct && !self.compiled {
            return bad("correct but not compiled");
        }
        if self.speedup.is_some() && !self.correct {
            return bad("speedup without correctness");
        }
        if let (Some(s), Some(b), Some(g)) = (self.speedup, self.t_baseline_ms, self.t_generated_ms) {
            let expect = b / g;
            if ((s - expect) / expect).abs() > T::lit(1e-6) {
                return bad("speedup differs from baseline / generated");
            }
        }
        Ok(())
    }

    /// 0 benchmarked or verified, 2 compile failure, 3 verification
    /// failure, 4 infrastructure error.
    pub fn exit_code(&self) -> i32 {
        if self.infra_error.is_some() {
            4
        } else if !self.compiled {
            2
        } else if !self.correct {
            3
        } else {
            0
        }
    }

    fn tier(&self) -> u8 {
        match (self.correct, self.speedup.is_some(), self.compiled) {
            (true, true, _) => 3,
            (true, false, _) => 2,
            (false, _, true) => 1,
            _ => 0,
        }
    }
}

/// `Greater` when `a` outranks `b`: benchmarked with higher speedup, then
/// correct, then compiled, then nothing.
pub fn rank_cmp<T: Scalar>(a: &EvaluationResult<T>, b: &EvaluationResult<T>) -> Ordering {
    a.tier().cmp(&b.tier()).then_with(|| match (a.speedup, b.speedup) {
        (Some(x), Some(y)) => x.partial_cmp(&y).unwrap_or(Ordering::Equal),
        _ => Ordering::Equal,
    })
}

/// Index of the best result; the earliest wins ties.
pub fn best_index<T: Scalar>(results: &[EvaluationResult<T>]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in results.iter().enumerate() {
        match best {
            Some(b) if rank_cmp(r, &results[b]) != Ordering::Greater => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn best_of<T: Scalar>(results: &[EvaluationResult<T>]) -> Result<&EvaluationResult<T>, MetricsError> {
    let first = results.first().ok_or(MetricsError::EmptyList)?;
    if let Some(other) = results.iter().find(|r| r.task_id != first.task_id) {
        return Err(MetricsError::MixedTasks(first.task_id.clone(), other.task_id.clone()));
    }
    Ok(&results[best_index(results).expect("non-empty")])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FastP<T> {
    pub threshold: T,
    pub pct: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CategoryMetrics<T> {
    pub n_tasks: usize,
    pub csr_pct: T,
    pub fcr_pct: T,
    pub fast_p: Vec<FastP<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MetricsReport<T> {
    pub n_tasks: usize,
    pub csr_pct: T,
    pub fcr_pct: T,
    pub fast_p: Vec<FastP<T>>,
    /// Every category appears, empty ones with zero rates.
    pub per_category: BTreeMap<OperatorCategory, CategoryMetrics<T>>,
}

impl<T: Scalar> MetricsReport<T> {
    pub fn fast(&self, threshold: T) -> Option<T> {
        self.fast_p.iter().find(|f| f.threshold == threshold).map(|f| f.pct)
    }
}

fn rates<T: Scalar>(rs: &[&EvaluationResult<T>], thresholds: &[T]) -> CategoryMetrics<T> {
    let n = rs.len();
    let pct = |k: usize| round_to(percent::<T>(k, n), 1);
    CategoryMetrics {
        n_tasks: n,
        csr_pct: pct(rs.iter().filter(|r| r.compiled).count()),
        fcr_pct: pct(rs.iter().filter(|r| r.correct).count()),
        fast_p: thresholds
            .iter()
            .map(|&p| FastP {
                threshold: p,
                pct: pct(rs
                    .iter()
                    .filter(|r| r.correct && r.speedup.is_some_and(|s| s > p))
                    .count()),
            })
            .collect(),
    }
}

/// Rates over one best result per task, as percentages rounded to one
/// decimal. A task counts for `fast_p` only when its speedup is strictly
/// greater than `p`.
pub fn compute_metrics<T: Scalar>(
    best_per_task: &[EvaluationResult<T>],
    thresholds: &[T],
) -> Result<MetricsReport<T>, MetricsError> {
    if best_per_task.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let mut seen = HashSet::new();
    for r in best_per_task {
        if !seen.insert(r.task_id.as_str()) {
            return Err(MetricsError::DuplicateTask(r.task_id.clone()));
        }
        r.validate()?;
    }
    let all: Vec<&EvaluationResult<T>> = best_per_task.iter().collect();
    let overall = rates(&all, thresholds);
    let per_category = OperatorCategory::ALL
        .iter()
        .map(|&c| {
            let rs: Vec<_> = all.iter().copied().filter(|r| r.category == c).collect();
            (c, rates(&rs, thresholds))
        })
        .collect();
    Ok(MetricsReport {
        n_tasks: overall.n_tasks,
        csr_pct: overall.csr_pct,
        fcr_pct: overall.fcr_pct,
        fast_p: overall.fast_p,
        per_category,
    })
}

/// Group results by task in first-seen order and keep each task's best.
pub fn best_per_task<T: Scalar>(results: &[EvaluationResult<T>]) -> Vec<EvaluationResult<T>> {
    let mut groups: indexmap::IndexMap<&str, Vec<EvaluationResult<T>>> = indexmap::IndexMap::new();
    for r in results {
        groups.entry(r.task_id.as_str()).or_default().push(r.clone());
    }
    groups
        .values()
        .map(|g| g[best_index(g).expect("groups are non-empty")].clone())
        .collect()
}
