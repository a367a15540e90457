//! Evaluation harness and agent loop for generated compute kernels.
//!
//! A candidate kernel is hot-swapped into a framework checkout, built,
//! checked against reference outputs, and timed on a local or remote
//! runner. The agent loop drives a language model through repair,
//! correction and acceleration plans using that feedback.
//!
//! Numeric types are generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix them to `f64`.

pub mod agents;
pub mod bench;
pub mod build;
pub mod diagnostics;
pub mod framework;
pub mod graph;
pub mod metrics;
pub mod pipeline;
pub mod process;
pub mod results;
pub mod scalar;
pub mod task;
pub mod tensor;
pub mod transport;
pub mod verify;
pub mod workspace;

pub use scalar::Scalar;
pub use task::{Manifest, Mechanism, OperatorCategory, TaskSpec};
pub use tensor::{DType, Tensor, TensorData};
pub use workspace::{KernelCandidate, Stage, Workspace};

pub type PerfProfile = bench::PerfProfile<f64>;
pub type VerifyResult = verify::VerifyResult<f64>;
pub type EvaluationResult = metrics::EvaluationResult<f64>;
pub type MetricsReport = metrics::MetricsReport<f64>;
pub type CandidateOutcome = pipeline::CandidateOutcome<f64>;
pub type EpisodeResult = agents::EpisodeResult<f64>;
pub type HistoryEntry = agents::HistoryEntry<f64>;
pub type ResultRecord = results::ResultRecord<f64>;
