//! Scalar abstraction shared by the numeric parts of the harness.
//!
//! Latencies, speedups, rewards, tolerances and percentages are computed
//! through [`Scalar`] so the same code serves `f32` and `f64` callers. The
//! crate root exposes `f64` aliases for the common case.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};
use serde::{de::DeserializeOwned, Serialize};

/// Floating point type usable for metrics: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + Debug + Display + Default + Send + Sync + Serialize + DeserializeOwned + 'static
{
    /// Lossless-where-possible conversion from `f64` literals.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean<T: Scalar>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        return None;
    }
    let sum = xs.iter().fold(T::zero(), |acc, &x| acc + x);
    Some(sum / T::from_count(xs.len()))
}

/// Median (average of the two middle values for even lengths).
pub fn median<T: Scalar>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        return None;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        Some(sorted[mid])
    } else {
        Some((sorted[mid - 1] + sorted[mid]) / T::lit(2.0))
    }
}

/// Round half away from zero to `digits` decimal places.
pub fn round_to<T: Scalar>(x: T, digits: i32) -> T {
    let scale = T::lit(10f64.powi(digits));
    (x * scale).round() / scale
}

/// `100 * part / whole`, zero when `whole == 0`.
pub fn percent<T: Scalar>(part: usize, whole: usize) -> T {
    if whole == 0 {
        return T::zero();
    }
    T::lit(100.0) * T::from_count(part) / T::from_count(whole)
}
