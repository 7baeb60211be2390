//! Affine map `y = x W^T + b` over a batch of row vectors.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;

use super::{join, uniform_init, Param, Parameters, Real, Slot};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone)]
pub struct Linear<F: Real> {
    pub weight: Param<F, Ix2>,
    pub bias: Param<F, Ix1>,
    cache: Option<Array2<F>>,
}

/// `input` is `[batch, in]`, `weight` is `[out, in]`.
pub fn linear_forward<F: Real>(
    input: ArrayView2<F>,
    weight: ArrayView2<F>,
    bias: ArrayView1<F>,
) -> Result<Array2<F>> {
    if input.ncols() != weight.ncols() {
        return Err(shape_err("linear input width", weight.ncols(), input.ncols()));
    }
    if bias.len() != weight.nrows() {
        return Err(shape_err("linear bias", weight.nrows(), bias.len()));
    }
    Ok(input.dot(&weight.t()) + bias)
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let weight = uniform_init(ndarray::Dim([out_features, in_features]), in_features, rng);
        Self::from_weights(weight, Array1::zeros(out_features)).expect("matching shapes")
    }

    pub fn from_weights(weight: Array2<F>, bias: Array1<F>) -> Result<Self> {
        if bias.len() != weight.nrows() {
            return Err(shape_err("linear bias", weight.nrows(), bias.len()));
        }
        Ok(Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn forward(&mut self, input: &Array2<F>) -> Result<Array2<F>> {
        let out = linear_forward(input.view(), self.weight.value.view(), self.bias.value.view())?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_output: &Array2<F>) -> Result<Array2<F>> {
        let input = self.cache.take().ok_or(Error::MissingCache("linear"))?;
        if grad_output.dim() != (input.nrows(), self.out_features()) {
            return Err(shape_err(
                "linear grad_output",
                (input.nrows(), self.out_features()),
                grad_output.dim(),
            ));
        }
        self.weight.grad += &grad_output.t().dot(&input);
        self.bias.grad += &grad_output.sum_axis(Axis(0));
        Ok(grad_output.dot(&self.weight.value))
    }
}

impl<F: Real> Parameters<F> for Linear<F> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(Slot<'_, F>)) {
        f(self.weight.slot(join(prefix, "weight")));
        f(self.bias.slot(join(prefix, "bias")));
    }
}
