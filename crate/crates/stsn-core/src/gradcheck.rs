//! Central finite-difference gradient verification.

use alloc::vec::Vec;

use crate::fmath;
use crate::tensor::{Tensor, TensorError};

/// Default perturbation for central differences.
pub const DEFAULT_H: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub enum GradCheckError {
    /// Two evaluations of the loss at the same point disagreed.
    NondeterministicLoss,
    /// Analytic gradient shape does not match the parameter.
    ShapeMismatch,
    Inner(TensorError),
}

impl core::fmt::Display for GradCheckError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GradCheckError::NondeterministicLoss => {
                write!(f, "loss function is not deterministic")
            }
            GradCheckError::ShapeMismatch => write!(f, "analytic gradient shape mismatch"),
            GradCheckError::Inner(e) => write!(f, "{e}"),
        }
    }
}

impl From<TensorError> for GradCheckError {
    fn from(e: TensorError) -> Self {
        GradCheckError::Inner(e)
    }
}

/// Relative error between an analytic and a numeric derivative:
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    fmath::abs(analytic - numeric) / fmath::abs(analytic).max(fmath::abs(numeric)).max(1e-8)
}

/// Compares an analytic gradient against central finite differences of
/// `loss_fn` and returns the maximum element-wise relative error.
///
/// `loss_fn` receives the perturbed parameter tensor and must re-run the
/// whole forward path deterministically (fixed RNG seeds, batch norm in eval
/// mode). Determinism is verified by evaluating the base point twice.
/// `elements` restricts the check to a subset of parameter indices; `None`
/// checks every element.
pub fn check_gradient<F>(
    param: &Tensor,
    analytic: &Tensor,
    mut loss_fn: F,
    h: f64,
    elements: Option<&[usize]>,
) -> Result<f64, GradCheckError>
where
    F: FnMut(&Tensor) -> Result<f64, TensorError>,
{
    if analytic.shape() != param.shape() {
        return Err(GradCheckError::ShapeMismatch);
    }
    let base_a = loss_fn(param)?;
    let base_b = loss_fn(param)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(GradCheckError::NondeterministicLoss);
    }

    let all: Vec<usize>;
    let idxs: &[usize] = match elements {
        Some(e) => e,
        None => {
            all = (0..param.len()).collect();
            &all
        }
    };

    let mut worst = 0.0f64;
    let mut perturbed = param.clone();
    for &i in idxs {
        let orig = perturbed.data()[i];
        perturbed.data_mut()[i] = orig + h;
        let up = loss_fn(&perturbed)?;
        perturbed.data_mut()[i] = orig - h;
        let down = loss_fn(&perturbed)?;
        perturbed.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Deterministic index subset for sampling large tensors: `limit` indices
/// evenly spread over the parameter.
pub fn spread_indices(len: usize, limit: usize) -> Vec<usize> {
    if len <= limit {
        return (0..len).collect();
    }
    (0..limit).map(|i| i * len / limit).collect()
}
