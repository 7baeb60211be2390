//! Rectified linear unit.

use ndarray::{Array, ArrayView, Dimension, Zip};

use super::Real;
use crate::error::{shape_err, Result};

pub fn relu_forward<F: Real, D: Dimension>(input: ArrayView<F, D>) -> Array<F, D> {
    input.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// Passes the gradient where the forward input was strictly positive.
/// The subgradient at exactly zero is taken as zero.
pub fn relu_backward<F: Real, D: Dimension>(
    grad_output: ArrayView<F, D>,
    input: ArrayView<F, D>,
) -> Result<Array<F, D>> {
    if grad_output.shape() != input.shape() {
        return Err(shape_err("relu_backward", input.shape(), grad_output.shape()));
    }
    let mut out = grad_output.to_owned();
    Zip::from(&mut out).and(&input).for_each(|g, &x| {
        if x <= F::zero() {
            *g = F::zero();
        }
    });
    Ok(out)
}
