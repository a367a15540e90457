//! Differential testing of runner outputs against pinned reference tensors.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::task::TaskSpec;
use crate::tensor::{output_file_name, Tensor, TensorData, TensorError};
use crate::transport::{join_remote, RunnerInvocation, Transport, TransportError};
use crate::workspace::Workspace;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToleranceMode {
    /// `|a - e| <= tol`
    #[default]
    Absolute,
    /// `|a - e| <= tol * max(|a|, |e|)`
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct VerifyResult<T> {
    pub passed: bool,
    /// `+inf` when shapes or dtypes disagree, or a NaN meets a number.
    pub max_abs_diff: T,
    pub tolerance: T,
    pub mismatch_count: usize,
    /// Flat index of the first failing element within its output.
    pub first_mismatch_index: Option<usize>,
    /// Which output the first failure came from.
    pub first_mismatch_output: Option<usize>,
    /// Set when the comparison failed structurally.
    pub note: Option<String>,
}

impl<T: Scalar> VerifyResult<T> {
    fn structural(tolerance: T, count: usize, note: String) -> Self {
        VerifyResult {
            passed: false,
            max_abs_diff: T::infinity(),
            tolerance,
            mismatch_count: count,
            first_mismatch_index: None,
            first_mismatch_output: Some(0),
            note: Some(note),
        }
    }
}

/// Elementwise comparison at absolute tolerance.
pub fn compare_tensors<T: Scalar>(actual: &Tensor, expected: &Tensor, tolerance: T) -> VerifyResult<T> {
    compare_tensors_with(actual, expected, tolerance, ToleranceMode::Absolute)
}

/// F32 data is compared in f32 arithmetic against the tolerance rounded to
/// f32, so a difference that prints as the tolerance counts as within it.
/// Integer and bool data must match exactly; each inequality is a diff of 1.
pub fn compare_tensors_with<T: Scalar>(
    actual: &Tensor,
    expected: &Tensor,
    tolerance: T,
    mode: ToleranceMode,
) -> VerifyResult<T> {
    if actual.dtype() != expected.dtype() {
        return VerifyResult::structural(
            tolerance,
            expected.len(),
            format!("dtype {:?} vs expected {:?}", actual.dtype(), expected.dtype()),
        );
    }
    if actual.shape() != expected.shape() {
        return VerifyResult::structural(
            tolerance,
            expected.len(),
            format!("shape {:?} vs expected {:?}", actual.shape(), expected.shape()),
        );
    }
    let (max, count, first) = match (actual.data(), expected.data()) {
        (TensorData::F32(a), TensorData::F32(e)) => {
            let tol32 = tolerance.to_f64_lossy() as f32;
            let (m, c, f) = float_diffs(a, e, tol32, mode);
            (T::lit(m as f64), c, f)
        }
        (TensorData::I32(a), TensorData::I32(e)) => exact_diffs(a, e),
        (TensorData::I64(a), TensorData::I64(e)) => exact_diffs(a, e),
        (TensorData::U8(a), TensorData::U8(e)) => exact_diffs(a, e),
        (TensorData::Bool(a), TensorData::Bool(e)) => exact_diffs(a, e),
        _ => unreachable!("dtypes checked above"),
    };
    VerifyResult {
        passed: count == 0,
        max_abs_diff: max,
        tolerance,
        mismatch_count: count,
        first_mismatch_index: first,
        first_mismatch_output: first.map(|_| 0),
        note: None,
    }
}

fn float_diffs(a: &[f32], e: &[f32], tol: f32, mode: ToleranceMode) -> (f32, usize, Option<usize>) {
    let mut max = 0.0f32;
    let mut count = 0;
    let mut first = None;
    for (i, (&x, &y)) in a.iter().zip(e).enumerate() {
        let diff = if x.is_nan() && y.is_nan() {
            0.0
        } else if x.is_nan() || y.is_nan() {
            f32::INFINITY
        } else if x == y {
            // also covers matching infinities
            0.0
        } else {
            (x - y).abs()
        };
        let bound = match mode {
            ToleranceMode::Absolute => tol,
            ToleranceMode::Relative => tol * x.abs().max(y.abs()),
        };
        // negated so NaN bounds count as failures
        if !(diff <= bound) {
            count += 1;
            first.get_or_insert(i);
        }
        max = max.max(diff);
    }
    (max, count, first)
}

fn exact_diffs<E: PartialEq, T: Scalar>(a: &[E], e: &[E]) -> (T, usize, Option<usize>) {
    let mut count = 0;
    let mut first = None;
    for (i, (x, y)) in a.iter().zip(e).enumerate() {
        if x != y {
            count += 1;
            first.get_or_insert(i);
        }
    }
    (if count > 0 { T::one() } else { T::zero() }, count, first)
}

/// Fold per-output results: passes only if every output passes.
pub fn fold_results<T: Scalar>(tolerance: T, results: &[VerifyResult<T>]) -> VerifyResult<T> {
    let mut out = VerifyResult {
        passed: true,
        max_abs_diff: T::zero(),
        tolerance,
        mismatch_count: 0,
        first_mismatch_index: None,
        first_mismatch_output: None,
        note: None,
    };
    for (k, r) in results.iter().enumerate() {
        out.passed &= r.passed;
        out.max_abs_diff = out.max_abs_diff.max(r.max_abs_diff);
        if r.max_abs_diff.is_infinite() {
            out.max_abs_diff = T::infinity();
        }
        out.mismatch_count += r.mismatch_count;
        if !r.passed && out.first_mismatch_output.is_none() {
            out.first_mismatch_output = Some(k);
            out.first_mismatch_index = r.first_mismatch_index;
            out.note = r.note.as_ref().map(|n| format!("output {k}: {n}"));
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("runner exited with {status:?}:\n{output}")]
    ExecutionFailure { status: Option<i32>, output: String },
    #[error("runner produced no output {index} ({path})")]
    OutputMissing { index: usize, path: String },
    #[error("runner binary {0} not found; was the framework built?")]
    RunnerMissing(PathBuf),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub tolerance: f64,
    pub mode: ToleranceMode,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            tolerance: DEFAULT_TOLERANCE,
            mode: ToleranceMode::Absolute,
        }
    }
}

/// Per-job staging directory on the target.
pub fn job_dir(transport: &dyn Transport, ws: &Workspace, task: &TaskSpec, purpose: &str) -> String {
    join_remote(
        &transport.staging_dir(),
        &format!("{}/{}/{}", ws.label(), task.id, purpose),
    )
}

/// Stage inputs and the runner, run it, return the invocation's output and
/// the remote output directory.
pub(crate) fn invoke_runner(
    ws: &Workspace,
    task: &TaskSpec,
    transport: &dyn Transport,
    purpose: &str,
    iters: u32,
    warmup: u32,
    inspect: bool,
) -> Result<(crate::transport::ExecOutput, String), VerifyError> {
    let runner = ws.runner_path();
    if !runner.exists() {
        return Err(VerifyError::RunnerMissing(runner));
    }
    let dir = job_dir(transport, ws, task, purpose);
    transport.reset_dir(&dir)?;
    let out_dir = join_remote(&dir, "out");
    transport.reset_dir(&out_dir)?;
    let mut inputs = Vec::new();
    for (i, local) in task.reference_inputs.iter().enumerate() {
        let remote = join_remote(&dir, &format!("in_{i}.tensor"));
        transport.push(local, &remote)?;
        inputs.push(remote);
    }
    let runner_remote = transport.stage_runner(&runner, &dir)?;
    let inv = RunnerInvocation {
        runner: runner_remote,
        op: task.operator_name.clone(),
        inputs,
        attrs: task.attributes.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        out_dir: out_dir.clone(),
        iters,
        warmup,
        inspect,
    };
    let out = transport.exec(&inv.argv())?;
    if !out.success() {
        return Err(VerifyError::ExecutionFailure {
            status: out.status,
            output: format!("{}{}", out.stdout, out.stderr),
        });
    }
    Ok((out, out_dir))
}

/// Run the built operator on the task's inputs and compare every output.
pub fn run_verification<T: Scalar>(
    ws: &Workspace,
    task: &TaskSpec,
    transport: &dyn Transport,
    opts: &VerifyOptions,
) -> Result<VerifyResult<T>, VerifyError> {
    let (_, out_dir) = invoke_runner(ws, task, transport, "verify", 1, 0, false)?;
    let local = tempfile::tempdir()?;
    let tol = T::lit(opts.tolerance);
    let mut results = Vec::with_capacity(task.reference_outputs.len());
    for (k, expected_path) in task.reference_outputs.iter().enumerate() {
        let remote = join_remote(&out_dir, &output_file_name(k));
        let dest = local.path().join(output_file_name(k));
        match transport.pull(&remote, &dest) {
            Ok(()) => {}
            Err(TransportError::NotFound(_)) => {
                return Err(VerifyError::OutputMissing { index: k, path: remote })
            }
            Err(e) => return Err(e.into()),
        }
        let actual = Tensor::read(&dest)?;
        let expected = Tensor::read(expected_path)?;
        results.push(compare_tensors_with(&actual, &expected, tol, opts.mode));
    }
    Ok(fold_results(tol, &results))
}

/// Ask the runner to describe the operator it would execute for `task`.
pub fn inspect_graph(
    ws: &Workspace,
    task: &TaskSpec,
    transport: &dyn Transport,
) -> Result<crate::graph::GraphDesc, VerifyError> {
    let (out, _) = invoke_runner(ws, task, transport, "inspect", 1, 0, true)?;
    crate::graph::parse_graph(&out.stdout).map_err(|e| VerifyError::ExecutionFailure {
        status: out.status,
        output: format!("unparseable graph description: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f32>) -> Tensor {
        let n = v.len();
        Tensor::f32(vec![n], v).unwrap()
    }

    #[test]
    fn identical_passes() {
        let r = compare_tensors(&t(vec![1.0, 2.0]), &t(vec![1.0, 2.0]), 1e-4f64);
        assert!(r.passed);
        assert_eq!(r.max_abs_diff, 0.0);
        assert_eq!(r.first_mismatch_index, None);
    }

    #[test]
    fn boundary_is_inclusive() {
        let r = compare_tensors(&t(vec![0.0]), &t(vec![1.0e-4]), 1e-4f64);
        assert!(r.passed, "{r:?}");
        let r = compare_tensors(&t(vec![0.0, 2.0e-4]), &t(vec![0.0, 0.0]), 1e-4f64);
        assert!(!r.passed);
        assert_eq!(r.mismatch_count, 1);
        assert_eq!(r.first_mismatch_index, Some(1));
        let r = compare_tensors(&t(vec![0.0]), &t(vec![1.0e-4]), 1e-4f32);
        assert!(r.passed);
    }

    #[test]
    fn shape_and_dtype_gate() {
        let a = Tensor::f32(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::f32(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let r = compare_tensors(&a, &b, 1.0f64);
        assert!(!r.passed);
        assert!(r.max_abs_diff.is_infinite());
        let c = Tensor::new(vec![2, 1], TensorData::I32(vec![1, 2])).unwrap();
        assert!(!compare_tensors(&a, &c, 1.0f64).passed);
    }

    #[test]
    fn nan_rules() {
        let r = compare_tensors(&t(vec![f32::NAN]), &t(vec![1.0]), 1e-4f64);
        assert!(!r.passed);
        assert!(r.max_abs_diff.is_infinite());
        assert!(compare_tensors(&t(vec![f32::NAN]), &t(vec![f32::NAN]), 1e-4f64).passed);
        assert!(compare_tensors(&t(vec![f32::INFINITY]), &t(vec![f32::INFINITY]), 1e-4f64).passed);
        assert!(!compare_tensors(&t(vec![f32::INFINITY]), &t(vec![f32::NEG_INFINITY]), 1e-4f64).passed);
    }

    #[test]
    fn integers_exact() {
        let a = Tensor::new(vec![3], TensorData::I64(vec![0, 1, 2])).unwrap();
        let b = Tensor::new(vec![3], TensorData::I64(vec![0, 1, 3])).unwrap();
        let r = compare_tensors(&a, &b, 10.0f64);
        assert!(!r.passed);
        assert_eq!(r.max_abs_diff, 1.0);
        assert_eq!(r.first_mismatch_index, Some(2));
    }

    #[test]
    fn relative_mode() {
        let a = t(vec![1000.0]);
        let b = t(vec![1000.05]);
        assert!(!compare_tensors(&a, &b, 1e-4f64).passed);
        assert!(compare_tensors_with(&a, &b, 1e-4f64, ToleranceMode::Relative).passed);
    }

    #[test]
    fn fold_takes_first_failure() {
        let ok = compare_tensors(&t(vec![1.0]), &t(vec![1.0]), 1e-4f64);
        let bad = compare_tensors(&t(vec![1.0, 5.0]), &t(vec![1.0, 1.0]), 1e-4f64);
        let f = fold_results(1e-4, &[ok.clone(), bad]);
        assert!(!f.passed);
        assert_eq!(f.first_mismatch_output, Some(1));
        assert_eq!(f.first_mismatch_index, Some(1));
        assert_eq!(f.max_abs_diff, 4.0);
        assert!(fold_results(1e-4, &[ok]).passed);
    }
}
