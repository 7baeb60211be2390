//! Multi-scale feature learning.
//!
//! `N` stacked layers. Layer `i < N` runs one branch per kernel size in
//! `{7, 11, ..., 4K + 3}` with dilation `d`; the last layer always uses
//! `{1, 3, 5}`. Each branch is `Conv1d -> ReLU -> BatchNorm` (in that order)
//! and branch outputs are concatenated along the channel axis in kernel
//! order. The final feature map is average-pooled over time and mapped to
//! class logits by a linear head.

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{
    join, relu_backward, relu_forward, softmax, BatchNorm1d, BnMode, Conv1d, ConvSpec, Linear,
    Parameters, Real, Slot,
};

/// Kernel sizes used by the final layer.
pub const FINAL_KERNELS: [usize; 3] = [1, 3, 5];

/// Ordered kernel sizes of layer `layer` (1-based) in an `num_layers`-deep stack.
pub fn kernel_set(layer: usize, scales: usize, num_layers: usize) -> Result<Vec<usize>> {
    if num_layers == 0 || layer == 0 || layer > num_layers {
        return Err(Error::Config(format!(
            "layer index {layer} outside 1..={num_layers}"
        )));
    }
    if layer == num_layers {
        return Ok(FINAL_KERNELS.to_vec());
    }
    if scales == 0 {
        return Err(Error::Config("at least one scale per layer is required".into()));
    }
    Ok((1..=scales).map(|k| 4 * k + 3).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsflSpec {
    pub num_layers: usize,
    pub scales_per_layer: usize,
    /// Dilation of the large-kernel layers `1..N-1`.
    pub dilation: usize,
    /// Dilation of the final `{1, 3, 5}` layer.
    pub final_dilation: usize,
    pub branch_channels: usize,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl MsflSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("scales_per_layer", self.scales_per_layer),
            ("dilation", self.dilation),
            ("final_dilation", self.final_dilation),
            ("branch_channels", self.branch_channels),
            ("input_channels", self.input_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn kernels(&self, layer: usize) -> Result<Vec<usize>> {
        kernel_set(layer, self.scales_per_layer, self.num_layers)
    }

    pub fn layer_dilation(&self, layer: usize) -> usize {
        if layer == self.num_layers {
            self.final_dilation
        } else {
            self.dilation
        }
    }

    pub fn layer_input_channels(&self, layer: usize) -> usize {
        if layer == 1 {
            self.input_channels
        } else {
            self.branch_channels * self.scales_per_layer
        }
    }

    /// Width of the pooled vector fed to the classifier head.
    pub fn feature_dim(&self) -> usize {
        self.branch_channels * FINAL_KERNELS.len()
    }
}

/// One `Conv1d -> ReLU -> BN` branch.
#[derive(Debug, Clone)]
pub struct Branch<F: Real> {
    pub conv: Conv1d<F>,
    pub bn: BatchNorm1d<F>,
    pre_activation: Option<Array3<F>>,
}

impl<F: Real> Branch<F> {
    pub fn new(conv: Conv1d<F>) -> Self {
        let bn = BatchNorm1d::new(conv.spec.out_channels);
        Self {
            conv,
            bn,
            pre_activation: None,
        }
    }

    pub fn forward(&mut self, input: &Array3<F>, mode: BnMode) -> Result<Array3<F>> {
        let pre = self.conv.forward(input)?;
        let act = relu_forward(pre.view());
        self.pre_activation = Some(pre);
        self.bn.forward(&act, mode)
    }

    pub fn backward(&mut self, grad_output: &Array3<F>) -> Result<Array3<F>> {
        let pre = self.pre_activation.take().ok_or(Error::MissingCache("msfl branch"))?;
        let g = self.bn.backward(grad_output)?;
        let g = relu_backward(g.view(), pre.view())?;
        self.conv.backward(&g)
    }
}

impl<F: Real> Parameters<F> for Branch<F> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(Slot<'_, F>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

/// Parallel branches whose outputs are concatenated channel-wise.
#[derive(Debug, Clone)]
pub struct MsflLayer<F: Real> {
    pub branches: Vec<Branch<F>>,
}

impl<F: Real> MsflLayer<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        branch_channels: usize,
        kernels: &[usize],
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let branches = kernels
            .iter()
            .map(|&f| {
                let spec = ConvSpec::new(in_channels, branch_channels, f, dilation)?;
                Ok(Branch::new(Conv1d::new(spec, rng)))
            })
            .collect::<Result<_>>()?;
        Ok(Self { branches })
    }

    pub fn in_channels(&self) -> usize {
        self.branches[0].conv.spec.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.branches.iter().map(|b| b.conv.spec.out_channels).sum()
    }

    pub fn forward(&mut self, input: &Array3<F>, mode: BnMode) -> Result<Array3<F>> {
        let (batch, channels, len) = input.dim();
        if channels != self.in_channels() {
            return Err(shape_err("msfl layer input channels", self.in_channels(), channels));
        }
        let mut out = Array3::<F>::zeros((batch, self.out_channels(), len));
        let mut offset = 0;
        for branch in &mut self.branches {
            let y = branch.forward(input, mode)?;
            let width = y.len_of(Axis(1));
            out.slice_mut(s![.., offset..offset + width, ..]).assign(&y);
            offset += width;
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad_output: &Array3<F>) -> Result<Array3<F>> {
        let mut grad_in: Option<Array3<F>> = None;
        let mut offset = 0;
        for branch in &mut self.branches {
            let width = branch.conv.spec.out_channels;
            let g = grad_output
                .slice(s![.., offset..offset + width, ..])
                .to_owned();
            offset += width;
            let gi = branch.backward(&g)?;
            match grad_in.as_mut() {
                Some(acc) => *acc += &gi,
                None => grad_in = Some(gi),
            }
        }
        grad_in.ok_or(Error::MissingCache("msfl layer"))
    }
}

impl<F: Real> Parameters<F> for MsflLayer<F> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(Slot<'_, F>)) {
        for (k, branch) in self.branches.iter_mut().enumerate() {
            branch.visit(&join(prefix, &format!("branch{k}")), f);
        }
    }
}

/// Average over the time axis: `[batch, ch, time] -> [batch, ch]`.
pub fn global_average_pool<F: Real>(features: &Array3<F>) -> Array2<F> {
    let len = F::from_usize(features.len_of(Axis(2))).expect("length fits");
    features.sum_axis(Axis(2)).mapv_into(|v| v / len)
}

/// Class probabilities for a final feature map: pool, project, softmax.
pub fn classify<F: Real>(features: &Array3<F>, head: &Linear<F>) -> Result<Array2<F>> {
    let pooled = global_average_pool(features);
    let logits = crate::nn::linear::linear_forward(
        pooled.view(),
        head.weight.value.view(),
        head.bias.value.view(),
    )?;
    Ok(softmax(logits.view()))
}

#[derive(Debug, Clone)]
pub struct MsflOutput<F> {
    pub logits: Array2<F>,
    /// Pooled pre-logit features, `[batch, feature_dim]`.
    pub pooled: Array2<F>,
}

/// The stacked multi-scale layers plus the classifier head.
#[derive(Debug, Clone)]
pub struct Msfl<F: Real> {
    pub spec: MsflSpec,
    pub layers: Vec<MsflLayer<F>>,
    pub head: Linear<F>,
    time_len: Option<usize>,
}

impl<F: Real> Msfl<F> {
    pub fn new<R: Rng + ?Sized>(spec: MsflSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.num_layers);
        for i in 1..=spec.num_layers {
            let kernels = spec.kernels(i)?;
            layers.push(MsflLayer::new(
                spec.layer_input_channels(i),
                spec.branch_channels,
                &kernels,
                spec.layer_dilation(i),
                rng,
            )?);
        }
        let head = Linear::new(spec.feature_dim(), spec.num_classes, rng);
        Ok(Self {
            spec,
            layers,
            head,
            time_len: None,
        })
    }

    /// Final-layer feature map for a `[batch, channels, time]` input.
    pub fn features(&mut self, input: &Array3<F>, mode: BnMode) -> Result<Array3<F>> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, mode)?;
        }
        Ok(x)
    }

    pub fn forward(&mut self, input: &Array3<F>, mode: BnMode) -> Result<MsflOutput<F>> {
        let features = self.features(input, mode)?;
        self.time_len = Some(features.len_of(Axis(2)));
        let pooled = global_average_pool(&features);
        let logits = self.head.forward(&pooled)?;
        Ok(MsflOutput { logits, pooled })
    }

    /// Returns the gradient with respect to the `[batch, channels, time]` input.
    pub fn backward(&mut self, grad_logits: &Array2<F>) -> Result<Array3<F>> {
        let len = self.time_len.take().ok_or(Error::MissingCache("msfl"))?;
        let grad_pooled = self.head.backward(grad_logits)?;
        let scale = F::one() / F::from_usize(len).expect("length fits");
        let (batch, channels) = grad_pooled.dim();
        let mut g = Array3::<F>::zeros((batch, channels, len));
        for ((b, c), &v) in grad_pooled.indexed_iter() {
            g.slice_mut(s![b, c, ..]).fill(v * scale);
        }
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }
}

impl<F: Real> Parameters<F> for Msfl<F> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(Slot<'_, F>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit(&join(prefix, &format!("layer{}", i + 1)), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_schedule_examples() {
        assert_eq!(kernel_set(1, 6, 2).unwrap(), vec![7, 11, 15, 19, 23, 27]);
        assert_eq!(kernel_set(2, 6, 2).unwrap(), vec![1, 3, 5]);
        assert_eq!(kernel_set(4, 1, 4).unwrap(), vec![1, 3, 5]);
        assert_eq!(kernel_set(1, 1, 3).unwrap(), vec![7]);
        assert!(kernel_set(0, 2, 2).is_err());
        assert!(kernel_set(3, 2, 2).is_err());
    }

    #[test]
    fn identity_branch_with_eval_bn_is_relu() {
        let spec = ConvSpec::new(1, 1, 1, 1).unwrap();
        let conv = Conv1d::from_weights(spec, Array3::ones((1, 1, 1)), Array1::zeros(1)).unwrap();
        let mut layer = MsflLayer {
            branches: vec![Branch::new(conv)],
        };
        // running stats (0, 1): eval BN divides by sqrt(1 + eps)
        layer.branches[0].bn.running_var[0] = 1.0 - 1e-5;
        let x = Array3::from_shape_vec((1, 1, 4), vec![-1.0, 2.0, 0.0, 3.5]).unwrap();
        let y = layer.forward(&x, BnMode::Eval).unwrap();
        assert_eq!(y, relu_forward(x.view()));
    }

    #[test]
    fn zero_input_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = MsflLayer::<f64>::new(2, 3, &[7, 11], 2, &mut rng).unwrap();
        for (k, b) in layer.branches.iter_mut().enumerate() {
            b.bn.beta.value = Array1::from_elem(3, k as f64 + 0.5);
        }
        let y = layer.forward(&Array3::zeros((2, 2, 9)), BnMode::Train).unwrap();
        assert_eq!(y.dim(), (2, 6, 9));
        for (c, lane) in y.axis_iter(Axis(1)).enumerate() {
            let expect = (c / 3) as f64 + 0.5;
            assert!(lane.iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MsflSpec {
            num_layers: 1,
            scales_per_layer: 1,
            dilation: 2,
            final_dilation: 1,
            branch_channels: 2,
            num_classes: 4,
            input_channels: 1,
        };
        let mut net = Msfl::<f64>::new(spec, &mut rng).unwrap();
        net.head.weight.value.fill(0.0);
        let x = Array3::from_shape_fn((3, 1, 6), |(b, _, t)| (b * 7 + t) as f64);
        let out = net.forward(&x, BnMode::Train).unwrap();
        let p = softmax(out.logits.view());
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let feats = net.features(&x, BnMode::Eval).unwrap();
        let p = classify(&feats, &net.head).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn pooling_constant_map() {
        let f = Array3::from_shape_fn((2, 3, 5), |(b, c, _)| (b * 3 + c) as f64 * 0.5);
        let p = global_average_pool(&f);
        let expect = Array2::from_shape_fn((2, 3), |(b, c)| (b * 3 + c) as f64 * 0.5);
        assert_eq!(p, expect);
    }

    #[test]
    fn spec_validation() {
        let mut spec = MsflSpec {
            num_layers: 2,
            scales_per_layer: 6,
            dilation: 2,
            final_dilation: 1,
            branch_channels: 32,
            num_classes: 3,
            input_channels: 1,
        };
        assert!(spec.validate().is_ok());
        assert_eq!(spec.feature_dim(), 96);
        assert_eq!(spec.layer_input_channels(2), 192);
        spec.num_classes = 1;
        assert!(spec.validate().is_err());
    }
}
