//! Differentiable building blocks used by the classifier.
//!
//! Every layer follows the same contract: `forward` caches whatever the
//! backward pass needs, `backward` consumes that cache, accumulates parameter
//! gradients into the layer's [`Param`]s and returns the gradient with respect
//! to the layer input. Calling `backward` without a preceding `forward` is an
//! error. Layers are generic over [`Real`] so the same code runs in `f64`
//! (gradient checks, oracles) and `f32` (training runs).

pub mod activation;
pub mod adam;
pub mod batchnorm;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod loss;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{Array, Dimension, LinalgScalar, ScalarOperand, ShapeBuilder};
use num_traits::{Float, FromPrimitive};
use rand::Rng;

pub use activation::{relu_backward, relu_forward};
pub use adam::{Adam, AdamConfig, AdamState};
pub use batchnorm::{BatchNorm1d, BnMode};
pub use conv::{conv1d_backward, conv1d_forward, Conv1d, ConvGrads, ConvSpec};
pub use gradcheck::{grad_check, GradCheckReport};
pub use linear::Linear;
pub use loss::{softmax, softmax_cross_entropy, CrossEntropy};

/// Floating point element type accepted by every kernel.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal is representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<F, D: Dimension> {
    pub value: Array<F, D>,
    pub grad: Array<F, D>,
}

impl<F: Real, D: Dimension> Param<F, D> {
    pub fn new(value: Array<F, D>) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub(crate) fn slot<'a>(&'a mut self, name: String) -> Slot<'a, F> {
        let shape = self.value.shape().to_vec();
        Slot {
            name,
            shape,
            value: self
                .value
                .as_slice_mut()
                .expect("parameters are stored contiguously"),
            grad: Some(
                self.grad
                    .as_slice_mut()
                    .expect("gradients are stored contiguously"),
            ),
        }
    }
}

/// Flat view of one named tensor owned by a model.
///
/// Trainable parameters carry a gradient; state buffers such as batch-norm
/// running statistics do not.
pub struct Slot<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [F],
    pub grad: Option<&'a mut [F]>,
}

impl<F> Slot<'_, F> {
    pub fn is_trainable(&self) -> bool {
        self.grad.is_some()
    }
}

pub(crate) fn buffer_slot<'a, F, D: Dimension>(
    name: String,
    array: &'a mut Array<F, D>,
) -> Slot<'a, F> {
    let shape = array.shape().to_vec();
    Slot {
        name,
        shape,
        value: array.as_slice_mut().expect("buffers are stored contiguously"),
        grad: None,
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything owning parameters and buffers, visited in a stable declared order.
///
/// The visit order is the serialization order of checkpoints and the slot
/// order of the optimizer, so implementations must never reorder it.
pub trait Parameters<F: Real> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(Slot<'_, F>));

    fn zero_grad(&mut self) {
        self.visit("", &mut |slot| {
            if let Some(g) = slot.grad {
                g.fill(F::zero());
            }
        });
    }

    fn num_trainable(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |slot| {
            if slot.is_trainable() {
                n += slot.value.len();
            }
        });
        n
    }

    /// Concatenated trainable values in visit order.
    fn flat_values(&mut self) -> Vec<F> {
        let mut out = Vec::new();
        self.visit("", &mut |slot| {
            if slot.is_trainable() {
                out.extend_from_slice(slot.value);
            }
        });
        out
    }

    /// Concatenated gradients in visit order.
    fn flat_grads(&mut self) -> Vec<F> {
        let mut out = Vec::new();
        self.visit("", &mut |slot| {
            if let Some(g) = slot.grad {
                out.extend_from_slice(g);
            }
        });
        out
    }

    /// Overwrite trainable values from a flat vector in visit order.
    fn set_flat_values(&mut self, values: &[F]) {
        let mut offset = 0;
        self.visit("", &mut |slot| {
            if slot.is_trainable() {
                let n = slot.value.len();
                slot.value.copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        });
        assert_eq!(offset, values.len(), "flat parameter length mismatch");
    }
}

/// Uniform initialization in ±sqrt(1/fan_in).
pub fn uniform_init<F: Real, D: Dimension, Sh: ShapeBuilder<Dim = D>, R: Rng + ?Sized>(
    shape: Sh,
    fan_in: usize,
    rng: &mut R,
) -> Array<F, D> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    Array::from_shape_simple_fn(shape, || F::lit(rng.gen_range(-bound..=bound)))
}

/// First index holding a NaN or infinity, if any.
pub fn first_non_finite<F: Real>(values: &[F]) -> Option<usize> {
    values.iter().position(|v| !v.is_finite())
}
