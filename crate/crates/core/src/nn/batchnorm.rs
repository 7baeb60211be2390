//! Batch normalization over `[batch, channels, time]`, statistics per channel.

use ndarray::{Array1, Array3, Axis, Ix1};

use super::{buffer_slot, join, Param, Parameters, Real, Slot};
use crate::error::{shape_err, Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update running statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

#[derive(Debug, Clone)]
struct BnCache<F> {
    normalized: Array3<F>,
    inv_std: Array1<F>,
    mode: BnMode,
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d<F: Real> {
    pub gamma: Param<F, Ix1>,
    pub beta: Param<F, Ix1>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub eps: F,
    pub momentum: F,
    cache: Option<BnCache<F>>,
}

impl<F: Real> BatchNorm1d<F> {
    /// gamma = 1, beta = 0, running statistics (0, 1).
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Array1::ones(channels)),
            beta: Param::new(Array1::zeros(channels)),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: F::lit(BN_EPS),
            momentum: F::lit(BN_MOMENTUM),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&mut self, input: &Array3<F>, mode: BnMode) -> Result<Array3<F>> {
        let (batch, channels, len) = input.dim();
        if channels != self.channels() {
            return Err(shape_err("batchnorm channels", self.channels(), channels));
        }
        let count = batch * len;
        let (mean, var) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(Error::DegenerateBatch { channel: 0, count });
                }
                let n = F::from_usize(count).expect("count fits");
                let mut mean = Array1::<F>::zeros(channels);
                let mut var = Array1::<F>::zeros(channels);
                for c in 0..channels {
                    let lane = input.index_axis(Axis(1), c);
                    let m = lane.sum() / n;
                    let v = lane.fold(F::zero(), |acc, &x| acc + (x - m) * (x - m)) / n;
                    mean[c] = m;
                    var[c] = v;
                }
                let one = F::one();
                let unbias = n / (n - one);
                self.running_mean = &self.running_mean * (one - self.momentum) + &(&mean * self.momentum);
                self.running_var =
                    &self.running_var * (one - self.momentum) + &(&var * (self.momentum * unbias));
                (mean, var)
            }
            BnMode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| F::one() / (v + self.eps).sqrt());
        let mut normalized = input.clone();
        for (c, mut lane) in normalized.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (mean[c], inv_std[c]);
            lane.mapv_inplace(|x| (x - m) * s);
        }
        let mut out = normalized.clone();
        for (c, mut lane) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            lane.mapv_inplace(|x| x * g + b);
        }
        self.cache = Some(BnCache {
            normalized,
            inv_std,
            mode,
        });
        Ok(out)
    }

    pub fn backward(&mut self, grad_output: &Array3<F>) -> Result<Array3<F>> {
        let cache = self.cache.take().ok_or(Error::MissingCache("batchnorm"))?;
        if grad_output.dim() != cache.normalized.dim() {
            return Err(shape_err(
                "batchnorm grad_output",
                cache.normalized.dim(),
                grad_output.dim(),
            ));
        }
        let (batch, _, len) = grad_output.dim();
        let n = F::from_usize(batch * len).expect("count fits");
        let mut grad_in = Array3::<F>::zeros(grad_output.raw_dim());
        for c in 0..self.channels() {
            let g = grad_output.index_axis(Axis(1), c);
            let xhat = cache.normalized.index_axis(Axis(1), c);
            let sum_g = g.sum();
            let sum_gx = g.iter().zip(xhat.iter()).fold(F::zero(), |a, (&gi, &xi)| a + gi * xi);
            self.gamma.grad[c] += sum_gx;
            self.beta.grad[c] += sum_g;
            let scale = self.gamma.value[c] * cache.inv_std[c];
            let mut dst = grad_in.index_axis_mut(Axis(1), c);
            match cache.mode {
                BnMode::Train => {
                    let k = scale / n;
                    ndarray::Zip::from(&mut dst)
                        .and(&g)
                        .and(&xhat)
                        .for_each(|d, &gi, &xi| *d = k * (n * gi - sum_g - xi * sum_gx));
                }
                BnMode::Eval => {
                    ndarray::Zip::from(&mut dst).and(&g).for_each(|d, &gi| *d = scale * gi);
                }
            }
        }
        Ok(grad_in)
    }
}

impl<F: Real> Parameters<F> for BatchNorm1d<F> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(Slot<'_, F>)) {
        f(self.gamma.slot(join(prefix, "gamma")));
        f(self.beta.slot(join(prefix, "beta")));
        f(buffer_slot(join(prefix, "running_mean"), &mut self.running_mean));
        f(buffer_slot(join(prefix, "running_var"), &mut self.running_var));
    }
}
