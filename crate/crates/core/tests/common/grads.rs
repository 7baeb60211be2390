//! Randomized gradient-check instances, one generator per differentiable
//! operation. Each call draws a fresh instance from `r` and returns the
//! finite-difference report over every input and parameter of that
//! instance. Layer outputs are reduced to a scalar with a random projection
//! so that every output element contributes with a distinct weight.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use itsc_core::imputation::{gru_cell, gru_cell_backward, impute_batch, GruParams, TemporalImputer};
use itsc_core::model::{ItscModel, ModelSpec, Variant};
use itsc_core::msfl::{Msfl, MsflSpec};
use itsc_core::nn::{
    conv1d_backward, conv1d_forward, grad_check, relu_backward, relu_forward, softmax_cross_entropy, BatchNorm1d,
    BnMode, ConvSpec, GradCheckReport, Linear, Parameters,
};
use itsc_core::training::imputation_loss_with_grad;

use super::{random, random_gru, random_mask, random_off_zero, FD_STEP, GRAD_TOL};

pub type Instance = fn(&mut ChaCha8Rng) -> GradCheckReport;

/// Every differentiable operation, by name.
pub const OPERATIONS: [(&str, Instance); 11] = [
    ("conv1d", conv1d),
    ("relu", relu),
    ("batchnorm (train)", batchnorm_train),
    ("batchnorm (eval)", batchnorm_eval),
    ("linear", linear),
    ("softmax cross-entropy", softmax_ce),
    ("gru cell", gru_cell_instance),
    ("imputation bptt", bptt),
    ("msfl + cross-entropy", msfl_ce),
    ("full model, joint loss", |r| model(r, Variant::Full)),
    ("ablation models, joint loss", |r| {
        let a = model(r, Variant::ZeroFill);
        let b = model(r, Variant::LinearHead);
        if a.max_relative_error >= b.max_relative_error { a } else { b }
    }),
];

fn flat<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    parts.into_iter().flat_map(|p| p.iter().copied()).collect()
}

fn split<'a>(v: &'a [f64], lens: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::new();
    let mut at = 0;
    for &l in lens {
        out.push(&v[at..at + l]);
        at += l;
    }
    assert_eq!(at, v.len());
    out
}

fn dot(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    (a * b).sum()
}

fn check(point: &[f64], analytic: &[f64], loss: impl FnMut(&[f64]) -> f64) -> GradCheckReport {
    grad_check(loss, point, analytic, GRAD_TOL, FD_STEP)
}

pub fn conv1d(r: &mut ChaCha8Rng) -> GradCheckReport {
    let (batch, cin, cout, len) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(3..=9));
    let f = 2 * r.gen_range(0..=3) + 1;
    let d = r.gen_range(1..=2);
    let spec = ConvSpec::new(cin, cout, f, d).unwrap();
    let x: Array3<f64> = random((batch, cin, len), r);
    let w: Array3<f64> = random((cout, cin, f), r);
    let b: Array1<f64> = random(cout, r);
    let proj: Array3<f64> = random((batch, cout, len), r);
    let g = conv1d_backward(proj.view(), x.view(), &spec, w.view()).unwrap();
    let lens = [x.len(), w.len(), b.len()];
    let point = flat([x.as_slice().unwrap(), w.as_slice().unwrap(), b.as_slice().unwrap()]);
    let analytic = flat([g.input.as_slice().unwrap(), g.weight.as_slice().unwrap(), g.bias.as_slice().unwrap()]);
    check(&point, &analytic, |v| {
        let p = split(v, &lens);
        let x = Array3::from_shape_vec(x.dim(), p[0].to_vec()).unwrap();
        let w = Array3::from_shape_vec(w.dim(), p[1].to_vec()).unwrap();
        let b = Array1::from(p[2].to_vec());
        dot(&conv1d_forward(x.view(), &spec, w.view(), b.view()).unwrap(), &proj)
    })
}

pub fn relu(r: &mut ChaCha8Rng) -> GradCheckReport {
    let len = r.gen_range(2..=8);
    let x: Array3<f64> = random_off_zero((2, 3, len), r);
    let proj: Array3<f64> = random(x.raw_dim(), r);
    let g = relu_backward(proj.view(), x.view()).unwrap();
    check(x.as_slice().unwrap(), g.as_slice().unwrap(), |v| {
        let x = Array3::from_shape_vec(x.dim(), v.to_vec()).unwrap();
        dot(&relu_forward(x.view()), &proj)
    })
}

fn bn_with(gamma: &[f64], beta: &[f64], mean: &Array1<f64>, var: &Array1<f64>) -> BatchNorm1d<f64> {
    let mut bn = BatchNorm1d::new(gamma.len());
    bn.gamma.value = Array1::from(gamma.to_vec());
    bn.beta.value = Array1::from(beta.to_vec());
    bn.running_mean = mean.clone();
    bn.running_var = var.clone();
    bn
}

fn batchnorm(r: &mut ChaCha8Rng, mode: BnMode) -> GradCheckReport {
    let (batch, c, len) = (r.gen_range(2..=4), r.gen_range(1..=3), r.gen_range(2..=6));
    let x: Array3<f64> = random((batch, c, len), r);
    let gamma: Array1<f64> = random(c, r);
    let beta: Array1<f64> = random(c, r);
    let mean: Array1<f64> = random(c, r);
    let var: Array1<f64> = random(c, r).mapv(|v: f64| v.abs() + 0.5);
    let proj: Array3<f64> = random(x.raw_dim(), r);
    let lens = [x.len(), c, c];
    let point = flat([x.as_slice().unwrap(), gamma.as_slice().unwrap(), beta.as_slice().unwrap()]);
    let mut bn = bn_with(gamma.as_slice().unwrap(), beta.as_slice().unwrap(), &mean, &var);
    bn.forward(&x, mode).unwrap();
    let gx = bn.backward(&proj).unwrap();
    let analytic = flat([gx.as_slice().unwrap(), bn.gamma.grad.as_slice().unwrap(), bn.beta.grad.as_slice().unwrap()]);
    check(&point, &analytic, |v| {
        let p = split(v, &lens);
        let mut bn = bn_with(p[1], p[2], &mean, &var);
        let x = Array3::from_shape_vec(x.dim(), p[0].to_vec()).unwrap();
        dot(&bn.forward(&x, mode).unwrap(), &proj)
    })
}

pub fn batchnorm_train(r: &mut ChaCha8Rng) -> GradCheckReport {
    batchnorm(r, BnMode::Train)
}

pub fn batchnorm_eval(r: &mut ChaCha8Rng) -> GradCheckReport {
    batchnorm(r, BnMode::Eval)
}

pub fn linear(r: &mut ChaCha8Rng) -> GradCheckReport {
    let (batch, inp, out) = (r.gen_range(1..=4), r.gen_range(1..=5), r.gen_range(1..=4));
    let x: Array2<f64> = random((batch, inp), r);
    let w: Array2<f64> = random((out, inp), r);
    let b: Array1<f64> = random(out, r);
    let proj: Array2<f64> = random((batch, out), r);
    let mut layer = Linear::from_weights(w.clone(), b.clone()).unwrap();
    layer.forward(&x).unwrap();
    let gx = layer.backward(&proj).unwrap();
    let lens = [x.len(), w.len(), b.len()];
    let point = flat([x.as_slice().unwrap(), w.as_slice().unwrap(), b.as_slice().unwrap()]);
    let analytic = flat([gx.as_slice().unwrap(), layer.weight.grad.as_slice().unwrap(), layer.bias.grad.as_slice().unwrap()]);
    check(&point, &analytic, |v| {
        let p = split(v, &lens);
        let mut l = Linear::from_weights(
            Array2::from_shape_vec(w.dim(), p[1].to_vec()).unwrap(),
            Array1::from(p[2].to_vec()),
        )
        .unwrap();
        let y = l.forward(&Array2::from_shape_vec(x.dim(), p[0].to_vec()).unwrap()).unwrap();
        (&y * &proj).sum()
    })
}

pub fn softmax_ce(r: &mut ChaCha8Rng) -> GradCheckReport {
    let (batch, classes) = (r.gen_range(1..=5), r.gen_range(2..=6));
    let logits: Array2<f64> = random((batch, classes), r).mapv(|v| 4.0 * v);
    let labels: Vec<usize> = (0..batch).map(|_| r.gen_range(0..classes)).collect();
    let ce = softmax_cross_entropy(logits.view(), &labels).unwrap();
    check(logits.as_slice().unwrap(), ce.grad_logits.as_slice().unwrap(), |v| {
        let l = Array2::from_shape_vec(logits.dim(), v.to_vec()).unwrap();
        softmax_cross_entropy(l.view(), &labels).unwrap().loss
    })
}

pub fn gru_cell_instance(r: &mut ChaCha8Rng) -> GradCheckReport {
    let (batch, n, m) = (r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=4));
    let mut p = random_gru(n, m, r);
    let u: Array2<f64> = random((batch, n), r);
    let h: Array2<f64> = random((batch, m), r);
    let proj: Array2<f64> = random((batch, m), r);
    let (gu, gh) = gru_cell_backward(u.view(), h.view(), &mut p, &proj).unwrap();
    let params = p.flat_values();
    let lens = [u.len(), h.len(), params.len()];
    let point = flat([u.as_slice().unwrap(), h.as_slice().unwrap(), &params[..]]);
    let analytic = flat([gu.as_slice().unwrap(), gh.as_slice().unwrap(), &p.flat_grads()[..]]);
    let mut probe = p.clone();
    check(&point, &analytic, |v| {
        let parts = split(v, &lens);
        probe.set_flat_values(parts[2]);
        let u = Array2::from_shape_vec(u.dim(), parts[0].to_vec()).unwrap();
        let h = Array2::from_shape_vec(h.dim(), parts[1].to_vec()).unwrap();
        (0..u.nrows())
            .map(|b| (&gru_cell(u.row(b), h.row(b), &probe).unwrap() * &proj.row(b)).sum())
            .sum()
    })
}

/// Loss touching every output of the imputation pass: projections of the
/// merged series and the final hidden state, plus the masked regression loss.
pub fn bptt_loss(p: &GruParams<f64>, x: &Array3<f64>, mask: &Array3<f64>, proj_u: &Array3<f64>, proj_h: &Array2<f64>) -> f64 {
    let tr = impute_batch(x.view(), mask.view(), p).unwrap();
    let (l_imp, _) = imputation_loss_with_grad(x.view(), tr.estimates.view(), mask.view());
    dot(&tr.imputed, proj_u) + (&tr.last_hidden() * proj_h).sum() + l_imp
}

/// A random imputation problem with its analytic parameter gradient.
pub struct BpttCase {
    pub params: GruParams<f64>,
    pub x: Array3<f64>,
    pub mask: Array3<f64>,
    pub proj_u: Array3<f64>,
    pub proj_h: Array2<f64>,
    pub analytic: Vec<f64>,
}

pub fn bptt_case(r: &mut ChaCha8Rng) -> BpttCase {
    let (batch, t, n, m) = (r.gen_range(1..=3), r.gen_range(2..=6), r.gen_range(1..=2), r.gen_range(1..=4));
    let params = random_gru(n, m, r);
    let mask = random_mask((batch, t, n), 0.4, r);
    let x = &random((batch, t, n), r) * &mask;
    let proj_u: Array3<f64> = random(x.raw_dim(), r);
    let proj_h: Array2<f64> = random((batch, m), r);
    let mut imp = TemporalImputer::new(params.clone());
    let tr = imp.forward(&x, &mask).unwrap();
    let (_, g_est) = imputation_loss_with_grad(x.view(), tr.estimates.view(), mask.view());
    imp.backward(&proj_u, &g_est, Some(&proj_h)).unwrap();
    let analytic = imp.params.flat_grads();
    BpttCase { params, x, mask, proj_u, proj_h, analytic }
}

impl BpttCase {
    pub fn check_with(&self, analytic: &[f64]) -> GradCheckReport {
        let mut probe = self.params.clone();
        let point = probe.flat_values();
        check(&point, analytic, |v| {
            probe.set_flat_values(v);
            bptt_loss(&probe, &self.x, &self.mask, &self.proj_u, &self.proj_h)
        })
    }
}

pub fn bptt(r: &mut ChaCha8Rng) -> GradCheckReport {
    let case = bptt_case(r);
    case.check_with(&case.analytic)
}

fn small_msfl_spec(r: &mut ChaCha8Rng) -> MsflSpec {
    MsflSpec {
        num_layers: r.gen_range(1..=3),
        scales_per_layer: r.gen_range(1..=2),
        dilation: r.gen_range(1..=2),
        final_dilation: 1,
        branch_channels: 2,
        num_classes: 3,
        input_channels: r.gen_range(1..=2),
    }
}

pub fn msfl_ce(r: &mut ChaCha8Rng) -> GradCheckReport {
    let spec = small_msfl_spec(r);
    let mut net = Msfl::<f64>::new(spec, r).unwrap();
    let (batch, len) = (r.gen_range(2..=4), r.gen_range(4..=12));
    let x: Array3<f64> = random((batch, spec.input_channels, len), r);
    let labels: Vec<usize> = (0..batch).map(|_| r.gen_range(0..3)).collect();
    let out = net.forward(&x, BnMode::Train).unwrap();
    let ce = softmax_cross_entropy(out.logits.view(), &labels).unwrap();
    let gx = net.backward(&ce.grad_logits).unwrap();
    let params = net.flat_values();
    let lens = [x.len(), params.len()];
    let point = flat([x.as_slice().unwrap(), &params[..]]);
    let analytic = flat([gx.as_slice().unwrap(), &net.flat_grads()[..]]);
    let mut probe = net.clone();
    check(&point, &analytic, |v| {
        let parts = split(v, &lens);
        probe.set_flat_values(parts[1]);
        let x = Array3::from_shape_vec(x.dim(), parts[0].to_vec()).unwrap();
        let logits = probe.forward(&x, BnMode::Train).unwrap().logits;
        softmax_cross_entropy(logits.view(), &labels).unwrap().loss
    })
}

const JOINT_BETA: f64 = 0.7;

fn joint_loss(model: &mut ItscModel<f64>, x: &Array3<f64>, mask: &Array3<f64>, labels: &[usize]) -> f64 {
    let out = model.forward(x, mask, BnMode::Train).unwrap();
    let l_cls = softmax_cross_entropy(out.logits.view(), labels).unwrap().loss;
    let l_imp = out
        .trace
        .map_or(0.0, |tr| imputation_loss_with_grad(x.view(), tr.estimates.view(), mask.view()).0);
    l_cls + JOINT_BETA * l_imp
}

/// Whole model under `L_cls + β L_imp`. All parameters, biases included,
/// are drawn at random: with zero biases and zero-filled input the
/// pre-activations would sit exactly on the ReLU kink.
pub fn model(r: &mut ChaCha8Rng, variant: Variant) -> GradCheckReport {
    let mut msfl = small_msfl_spec(r);
    msfl.num_layers = 2;
    let spec = ModelSpec {
        input_dims: msfl.input_channels,
        hidden_size: 3,
        num_classes: 3,
        msfl,
        variant,
    };
    let mut model = ItscModel::<f64>::new(spec, r).unwrap();
    let generic: Vec<f64> = (0..model.num_trainable()).map(|_| r.gen_range(-0.8..0.8)).collect();
    model.set_flat_values(&generic);
    let (batch, t) = (3, r.gen_range(3..=8));
    let mask = random_mask((batch, t, spec.input_dims), 0.4, r);
    let x = &random((batch, t, spec.input_dims), r) * &mask;
    let labels: Vec<usize> = (0..batch).map(|_| r.gen_range(0..3)).collect();

    model.zero_grad();
    let out = model.forward(&x, &mask, BnMode::Train).unwrap();
    let ce = softmax_cross_entropy(out.logits.view(), &labels).unwrap();
    let g_est = out
        .trace
        .as_ref()
        .map(|tr| imputation_loss_with_grad(x.view(), tr.estimates.view(), mask.view()).1 * JOINT_BETA);
    model.backward(&ce.grad_logits, g_est.as_ref()).unwrap();
    let point = model.flat_values();
    let analytic = model.flat_grads();
    let mut probe = model.clone();
    check(&point, &analytic, |v| {
        probe.set_flat_values(v);
        joint_loss(&mut probe, &x, &mask, &labels)
    })
}

/// Corrupts one analytic coordinate by 1% (at least 0.01 absolute) and
/// reports whether the checker flagged exactly that coordinate.
pub fn corruption_detected(r: &mut ChaCha8Rng) -> bool {
    let case = bptt_case(r);
    let mut analytic = case.analytic.clone();
    let target = r.gen_range(0..analytic.len());
    analytic[target] += 1e-2 * analytic[target].abs().max(1.0);
    let report = case.check_with(&analytic);
    !report.passed() && report.failing_coordinate == Some(target)
}
