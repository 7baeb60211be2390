//! Dilated 1-D convolution with "same" zero padding.
//!
//! Layout:
//!
//! * input:  `[batch, in_channels, time]`
//! * weight: `[out_channels, in_channels, kernel_size]`
//! * bias:   `[out_channels]`
//! * output: `[batch, out_channels, time]`
//!
//! Padding taps are virtual: the unfolded column matrix simply leaves them at
//! zero, which is bit-equivalent to convolving an explicitly padded buffer.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3, Axis};
use rand::Rng;

use super::{join, uniform_init, Param, Parameters, Real, Slot};
use crate::error::{shape_err, Error, Result};

/// Geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!(
                "convolution channels must be positive (in={in_channels}, out={out_channels})"
            )));
        }
        if kernel_size == 0 || kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel size must be odd and positive, got {kernel_size}"
            )));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be positive".into()));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel_size,
            dilation,
        })
    }

    /// Zero taps added on each side so that output length equals input length.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel_size - 1) / 2
    }

    pub fn weight_shape(&self) -> (usize, usize, usize) {
        (self.out_channels, self.in_channels, self.kernel_size)
    }

    fn unfolded_rows(&self) -> usize {
        self.in_channels * self.kernel_size
    }
}

/// Gradients produced by [`conv1d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads<F> {
    pub input: Array3<F>,
    pub weight: Array3<F>,
    pub bias: Array1<F>,
}

fn check_input<F>(input: &ArrayView3<F>, spec: &ConvSpec) -> Result<()> {
    let (_, c, t) = input.dim();
    if c != spec.in_channels {
        return Err(shape_err("conv1d input channels", spec.in_channels, c));
    }
    if t == 0 {
        return Err(Error::Empty("conv1d input has zero time steps".into()));
    }
    Ok(())
}

fn check_weights<F>(weight: &ArrayView3<F>, bias: &ArrayView1<F>, spec: &ConvSpec) -> Result<()> {
    if weight.dim() != spec.weight_shape() {
        return Err(shape_err("conv1d weight", spec.weight_shape(), weight.dim()));
    }
    if bias.len() != spec.out_channels {
        return Err(shape_err("conv1d bias", spec.out_channels, bias.len()));
    }
    Ok(())
}

/// Unfold `[batch, in, time]` into `[in * kernel, batch * time]`.
fn unfold<F: Real>(input: &ArrayView3<F>, spec: &ConvSpec) -> Array2<F> {
    let (batch, channels, len) = input.dim();
    let f = spec.kernel_size;
    let pad = spec.padding() as isize;
    let mut cols = Array2::<F>::zeros((spec.unfolded_rows(), batch * len));
    let input = input.as_standard_layout();
    let src = input.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("fresh array");
    let row_len = batch * len;
    for c in 0..channels {
        for k in 0..f {
            let offset = (k * spec.dilation) as isize - pad;
            let t_lo = (-offset).max(0) as usize;
            let t_hi = (len as isize - offset).clamp(0, len as isize) as usize;
            if t_lo >= t_hi {
                continue;
            }
            let row = (c * f + k) * row_len;
            for b in 0..batch {
                let s0 = (b * channels + c) * len;
                let s_lo = (s0 as isize + t_lo as isize + offset) as usize;
                let n = t_hi - t_lo;
                let d_lo = row + b * len + t_lo;
                dst[d_lo..d_lo + n].copy_from_slice(&src[s_lo..s_lo + n]);
            }
        }
    }
    cols
}

/// Scatter-add the column gradient back onto the input positions.
fn fold<F: Real>(cols: &Array2<F>, spec: &ConvSpec, batch: usize, len: usize) -> Array3<F> {
    let channels = spec.in_channels;
    let f = spec.kernel_size;
    let pad = spec.padding() as isize;
    let mut out = Array3::<F>::zeros((batch, channels, len));
    let dst = out.as_slice_mut().expect("fresh array");
    let src = cols.as_slice().expect("standard layout");
    let row_len = batch * len;
    for c in 0..channels {
        for k in 0..f {
            let offset = (k * spec.dilation) as isize - pad;
            let t_lo = (-offset).max(0) as usize;
            let t_hi = (len as isize - offset).clamp(0, len as isize) as usize;
            if t_lo >= t_hi {
                continue;
            }
            let row = (c * f + k) * row_len;
            for b in 0..batch {
                let d0 = (b * channels + c) * len;
                let d_lo = (d0 as isize + t_lo as isize + offset) as usize;
                let s_lo = row + b * len + t_lo;
                let n = t_hi - t_lo;
                for (d, s) in dst[d_lo..d_lo + n].iter_mut().zip(&src[s_lo..s_lo + n]) {
                    *d += *s;
                }
            }
        }
    }
    out
}

/// `[batch, ch, time]` -> `[ch, batch * time]`
fn to_channel_major<F: Real>(x: &ArrayView3<F>) -> Array2<F> {
    let (b, c, t) = x.dim();
    let mut out = Array2::<F>::zeros((c, b * t));
    for (bi, sample) in x.outer_iter().enumerate() {
        out.slice_mut(ndarray::s![.., bi * t..(bi + 1) * t])
            .assign(&sample);
    }
    out
}

/// Same-padded dilated convolution of a batch.
pub fn conv1d_forward<F: Real>(
    input: ArrayView3<F>,
    spec: &ConvSpec,
    weight: ArrayView3<F>,
    bias: ArrayView1<F>,
) -> Result<Array3<F>> {
    check_input(&input, spec)?;
    check_weights(&weight, &bias, spec)?;
    let (batch, _, len) = input.dim();
    let cols = unfold(&input, spec);
    let w = weight
        .as_standard_layout()
        .into_shape_with_order((spec.out_channels, spec.unfolded_rows()))
        .expect("contiguous weight")
        .to_owned();
    let out2 = w.dot(&cols);
    let mut out = Array3::<F>::zeros((batch, spec.out_channels, len));
    for (bi, mut sample) in out.outer_iter_mut().enumerate() {
        sample.assign(&out2.slice(ndarray::s![.., bi * len..(bi + 1) * len]));
        for (mut row, &b) in sample.outer_iter_mut().zip(bias.iter()) {
            row += b;
        }
    }
    Ok(out)
}

/// Gradients of [`conv1d_forward`] given the upstream gradient and the
/// forward input.
pub fn conv1d_backward<F: Real>(
    grad_output: ArrayView3<F>,
    input: ArrayView3<F>,
    spec: &ConvSpec,
    weight: ArrayView3<F>,
) -> Result<ConvGrads<F>> {
    check_input(&input, spec)?;
    let (batch, _, len) = input.dim();
    if grad_output.dim() != (batch, spec.out_channels, len) {
        return Err(shape_err(
            "conv1d grad_output",
            (batch, spec.out_channels, len),
            grad_output.dim(),
        ));
    }
    if weight.dim() != spec.weight_shape() {
        return Err(shape_err("conv1d weight", spec.weight_shape(), weight.dim()));
    }
    let g2 = to_channel_major(&grad_output);
    let cols = unfold(&input, spec);
    let w = weight
        .as_standard_layout()
        .into_shape_with_order((spec.out_channels, spec.unfolded_rows()))
        .expect("contiguous weight")
        .to_owned();
    let grad_w = g2
        .dot(&cols.t())
        .into_shape_with_order(spec.weight_shape())
        .expect("weight gradient shape");
    let grad_b = g2.sum_axis(Axis(1));
    let grad_cols = w.t().dot(&g2);
    let grad_in = fold(&grad_cols, spec, batch, len);
    Ok(ConvGrads {
        input: grad_in,
        weight: grad_w,
        bias: grad_b,
    })
}

/// Convolution layer owning its weights and forward cache.
#[derive(Debug, Clone)]
pub struct Conv1d<F: Real> {
    pub spec: ConvSpec,
    pub weight: Param<F, ndarray::Ix3>,
    pub bias: Param<F, ndarray::Ix1>,
    cache: Option<Array3<F>>,
}

impl<F: Real> Conv1d<F> {
    /// Weights uniform in ±sqrt(1/(in_channels * kernel_size)), zero bias.
    pub fn new<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Self {
        let fan_in = spec.in_channels * spec.kernel_size;
        let weight = uniform_init(spec.weight_shape(), fan_in, rng);
        Self::from_weights(spec, weight, Array1::zeros(spec.out_channels))
            .expect("initializer produces matching shapes")
    }

    pub fn from_weights(spec: ConvSpec, weight: Array3<F>, bias: Array1<F>) -> Result<Self> {
        check_weights(&weight.view(), &bias.view(), &spec)?;
        Ok(Self {
            spec,
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        })
    }

    pub fn forward(&mut self, input: &Array3<F>) -> Result<Array3<F>> {
        let out = conv1d_forward(
            input.view(),
            &self.spec,
            self.weight.value.view(),
            self.bias.value.view(),
        )?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, grad_output: &Array3<F>) -> Result<Array3<F>> {
        let input = self.cache.take().ok_or(Error::MissingCache("conv1d"))?;
        let grads = conv1d_backward(
            grad_output.view(),
            input.view(),
            &self.spec,
            self.weight.value.view(),
        )?;
        self.weight.grad += &grads.weight;
        self.bias.grad += &grads.bias;
        Ok(grads.input)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl<F: Real> Parameters<F> for Conv1d<F> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(Slot<'_, F>)) {
        f(self.weight.slot(join(prefix, "weight")));
        f(self.bias.slot(join(prefix, "bias")));
    }
}
