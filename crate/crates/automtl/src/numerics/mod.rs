//! Dense tensor arithmetic with reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, CheckResult, GradCheckReport, FD_STEP, SAMPLE_LIMIT};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Clamp applied to log arguments inside cross-entropy.
pub const EPS_LOG: f64 = 1e-12;
/// Norms below this count as zero vectors.
pub const EPS_NORM: f64 = 1e-12;

/// `u . v / (|u| |v|)`. Errors when either norm falls below [`EPS_NORM`].
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine_similarity: {} vs {} entries",
            u.len(),
            v.len()
        )));
    }
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < EPS_NORM || nv < EPS_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(dot / (nu * nv))
}
