//! Independent reference implementations and pinned tolerances shared by
//! the integration tests.
//!
//! The oracles here are deliberately naive: explicit index loops over plain
//! `Vec`s, no batching, no im2col, no shared code with the library kernels.

#![allow(dead_code, clippy::needless_range_loop)]

pub mod checks;
pub mod grads;

use ndarray::{Array, Array1, Array2, Array3, Dimension, ShapeBuilder};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use itsc_core::imputation::GruParams;

/// Central-difference agreement required of every analytic gradient (f64).
pub const GRAD_TOL: f64 = 1e-4;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Randomized instances per gradient check.
pub const GRAD_INSTANCES: usize = 20;
/// Agreement between a library kernel and its loop oracle (f64).
pub const ORACLE_TOL: f64 = 1e-12;
/// Randomized instances for the convolution oracle.
pub const CONV_ORACLE_INSTANCES: usize = 100;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random<D: Dimension, Sh: ShapeBuilder<Dim = D>>(shape: Sh, rng: &mut ChaCha8Rng) -> Array<f64, D> {
    Array::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks stay out of reach of the
/// finite-difference step.
pub fn random_off_zero<D: Dimension, Sh: ShapeBuilder<Dim = D>>(shape: Sh, rng: &mut ChaCha8Rng) -> Array<f64, D> {
    Array::from_shape_simple_fn(shape, || {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

pub fn random_mask(shape: (usize, usize, usize), p_missing: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || if rng.gen_bool(p_missing) { 0.0 } else { 1.0 })
}

pub fn max_abs_diff<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Same-padded dilated convolution, one output element at a time.
pub fn conv_direct(x: &Array3<f64>, w: &Array3<f64>, bias: &Array1<f64>, dilation: usize) -> Array3<f64> {
    let (batch, cin, len) = x.dim();
    let (cout, cin_w, f) = w.dim();
    assert_eq!(cin, cin_w);
    let pad = (dilation * (f - 1) / 2) as isize;
    let mut out = Array3::zeros((batch, cout, len));
    for b in 0..batch {
        for o in 0..cout {
            for t in 0..len {
                let mut acc = bias[o];
                for c in 0..cin {
                    for k in 0..f {
                        let src = t as isize + (k * dilation) as isize - pad;
                        if src >= 0 && (src as usize) < len {
                            acc += w[[o, c, k]] * x[[b, c, src as usize]];
                        }
                    }
                }
                out[[b, o, t]] = acc;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matvec(w: &Array2<f64>, v: &[f64]) -> Vec<f64> {
    (0..w.nrows())
        .map(|i| (0..w.ncols()).map(|j| w[[i, j]] * v[j]).sum())
        .collect()
}

/// Scalar GRU cell.
pub fn gru_cell_scalar(p: &GruParams<f64>, u: &[f64], h: &[f64]) -> Vec<f64> {
    let m = h.len();
    let (xz, hz) = (matvec(&p.w_xz.value, u), matvec(&p.w_hz.value, h));
    let (xr, hr) = (matvec(&p.w_xr.value, u), matvec(&p.w_hr.value, h));
    let z: Vec<f64> = (0..m).map(|i| sigmoid(xz[i] + hz[i] + p.b_z.value[i])).collect();
    let r: Vec<f64> = (0..m).map(|i| sigmoid(xr[i] + hr[i] + p.b_r.value[i])).collect();
    let rh: Vec<f64> = (0..m).map(|i| r[i] * h[i]).collect();
    let (xh, hh) = (matvec(&p.w_xh.value, u), matvec(&p.w_hh.value, &rh));
    (0..m)
        .map(|i| {
            let cand = (xh[i] + hh[i] + p.b_h.value[i]).tanh();
            z[i] * cand + (1.0 - z[i]) * h[i]
        })
        .collect()
}

/// `(imputed, estimates, hidden)`, each indexed by time step.
pub type ScalarTrace = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Scalar imputation recurrence over one `[time, dims]` series.
pub fn impute_scalar(p: &GruParams<f64>, x: &Array2<f64>, mask: &Array2<f64>) -> ScalarTrace {
    let (t_len, n) = x.dim();
    let m = p.hidden_size();
    let mut h = vec![0.0; m];
    let mut est = vec![0.0; n];
    let (mut us, mut ests, mut hs) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..t_len {
        let u: Vec<f64> = (0..n)
            .map(|j| if mask[[t, j]] == 1.0 { x[[t, j]] } else { est[j] })
            .collect();
        ests.push(est.clone());
        h = gru_cell_scalar(p, &u, &h);
        us.push(u);
        hs.push(h.clone());
        est = (0..n)
            .map(|j| (0..m).map(|k| p.w_imp.value[[j, k]] * h[k]).sum::<f64>() + p.b_imp.value[j])
            .collect();
    }
    (us, ests, hs)
}

/// Biases are zero after construction; randomize them too so the tests
/// exercise every parameter.
pub fn random_gru(n: usize, m: usize, rng: &mut ChaCha8Rng) -> GruParams<f64> {
    let mut p = GruParams::new(n, m, rng);
    for b in [&mut p.b_z, &mut p.b_r, &mut p.b_h, &mut p.b_imp] {
        b.value = random(b.value.len(), rng);
    }
    p
}
