//! Scalar reward for reinforcement fine-tuning of kernel generators.

use thiserror::Error;

use crate::scalar::Scalar;

/// Paid once a candidate compiles, in the shaped form only.
pub const COMPILE_REWARD: f64 = 0.3;
/// Paid once a candidate is functionally correct.
pub const CORRECT_REWARD: f64 = 0.3;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("a correct candidate needs both latencies")]
    MissingLatency,
    #[error("latencies must be positive (baseline {baseline}, generated {generated})")]
    NonPositiveLatency { baseline: f64, generated: f64 },
    #[error("correct but not compiled")]
    CorrectWithoutCompile,
}

/// `0.3·[correct] + (T_baseline / T_generated)·[correct]`, plus
/// `0.3·[compiled]` when `shaped`. Unclipped.
pub fn grpo_reward<T: Scalar>(
    compiled: bool,
    correct: bool,
    t_baseline_ms: Option<T>,
    t_generated_ms: Option<T>,
    shaped: bool,
) -> Result<T, RewardError> {
    if correct && !compiled {
        return Err(RewardError::CorrectWithoutCompile);
    }
    let mut r = T::zero();
    if shaped && compiled {
        r = r + T::lit(COMPILE_REWARD);
    }
    if correct {
        let (b, g) = match (t_baseline_ms, t_generated_ms) {
            (Some(b), Some(g)) => (b, g),
            _ => return Err(RewardError::MissingLatency),
        };
        if !(b > T::zero() && g > T::zero() && b.is_finite() && g.is_finite()) {
            return Err(RewardError::NonPositiveLatency {
                baseline: b.to_f64_lossy(),
                generated: g.to_f64_lossy(),
            });
        }
        r = r + T::lit(CORRECT_REWARD) + b / g;
    }
    Ok(r)
}
