//! Learned-hash top-k retrieval over a KV cache.
//!
//! Keys and queries are mapped to short binary codes by a hashing function
//! (a random rotation for the linear LSH baseline, or a trained two-layer
//! SiLU MLP). At decode time the cache entries whose codes agree with the
//! query's code on the most bit positions are gathered and attention runs
//! over that subset only.
//!
//! Modules:
//! - [`bitcodes`]: packed codes, NXOR/popcount scoring, exact top-k.
//! - [`hashers`]: linear, MLP and down-projection estimators.
//! - [`ranking_loss`]: pairwise Bradley-Terry objective and its gradient.
//! - [`trainer`]: AdamW training loop with warmup and cosine annealing.
//! - [`synthkv`]: cone-shaped synthetic query/key data and the dump format.
//! - [`attention_eval`]: reference attention, retrieval pipelines and IoU.

pub mod attention_eval;
pub mod bitcodes;
mod binio;
pub mod error;
pub mod hashers;
pub mod ranking_loss;
pub mod synthkv;
pub mod trainer;

pub use error::{Error, Result};

use nalgebra::{DMatrix, RealField};

/// Floating-point types the numeric paths are generic over (`f32` for
/// production, `f64` for validation).
pub trait Real: RealField + Copy + Send + Sync {
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

#[inline]
pub(crate) fn lit<T: Real>(x: f64) -> T {
    nalgebra::convert(x)
}

pub(crate) fn all_finite<T: Real>(m: &DMatrix<T>) -> bool {
    m.iter().all(|v| v.to_f64().is_finite())
}

/// Builds a matrix from row-major data.
pub fn matrix_from_rows<T: Real>(rows: usize, cols: usize, data: &[T]) -> Result<DMatrix<T>> {
    if data.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{} values cannot fill a {rows}x{cols} matrix",
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

/// Row-major copy of a matrix's entries.
pub fn matrix_to_rows<T: Real>(m: &DMatrix<T>) -> Vec<T> {
    m.transpose().as_slice().to_vec()
}
