//! Temporal imputation: a GRU scans the series one step at a time, regresses
//! the next value from its hidden state, and substitutes that estimate at
//! every position the mask marks as missing.
//!
//! With `h_0 = 0` and `x̃_1 = 0`, for `t = 1..T`:
//!
//! ```text
//! u_t   = m_t ? x_t : x̃_t
//! z_t   = σ(W_xz u_t + W_hz h_{t-1} + b_z)
//! r_t   = σ(W_xr u_t + W_hr h_{t-1} + b_r)
//! h̃_t   = tanh(W_xh u_t + W_hh (r_t ⊙ h_{t-1}) + b_h)
//! h_t   = z_t ⊙ h̃_t + (1 - z_t) ⊙ h_{t-1}
//! x̃_t+1 = W_imp h_t + b_imp
//! ```
//!
//! Everything is batched: series are `[batch, time, dims]`, hidden states
//! `[batch, time, hidden]`. Observed values are selected, never multiplied,
//! so whatever is stored at a missing position cannot leak into the output.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, Ix1, Ix2, Zip};
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{join, uniform_init, Param, Parameters, Real, Slot};

/// GRU gates plus the regression head that predicts the next value.
#[derive(Debug, Clone)]
pub struct GruParams<F: Real> {
    pub w_xz: Param<F, Ix2>,
    pub w_hz: Param<F, Ix2>,
    pub b_z: Param<F, Ix1>,
    pub w_xr: Param<F, Ix2>,
    pub w_hr: Param<F, Ix2>,
    pub b_r: Param<F, Ix1>,
    pub w_xh: Param<F, Ix2>,
    pub w_hh: Param<F, Ix2>,
    pub b_h: Param<F, Ix1>,
    /// `[input_size, hidden_size]`
    pub w_imp: Param<F, Ix2>,
    pub b_imp: Param<F, Ix1>,
}

impl<F: Real> GruParams<F> {
    pub fn new<R: Rng + ?Sized>(input_size: usize, hidden_size: usize, rng: &mut R) -> Self {
        let (n, m) = (input_size, hidden_size);
        let x_mat = |rng: &mut R| Param::new(uniform_init(ndarray::Dim([m, n]), n, rng));
        let w_xz = x_mat(rng);
        let w_xr = x_mat(rng);
        let w_xh = x_mat(rng);
        let h_mat = |rng: &mut R| Param::new(uniform_init(ndarray::Dim([m, m]), m, rng));
        let w_hz = h_mat(rng);
        let w_hr = h_mat(rng);
        let w_hh = h_mat(rng);
        let w_imp = Param::new(uniform_init(ndarray::Dim([n, m]), m, rng));
        Self {
            w_xz,
            w_hz,
            b_z: Param::new(Array1::zeros(m)),
            w_xr,
            w_hr,
            b_r: Param::new(Array1::zeros(m)),
            w_xh,
            w_hh,
            b_h: Param::new(Array1::zeros(m)),
            w_imp,
            b_imp: Param::new(Array1::zeros(n)),
        }
    }

    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let (n, m) = (input_size, hidden_size);
        let p2 = |r, c| Param::new(Array2::zeros((r, c)));
        let p1 = |r| Param::new(Array1::zeros(r));
        Self {
            w_xz: p2(m, n),
            w_hz: p2(m, m),
            b_z: p1(m),
            w_xr: p2(m, n),
            w_hr: p2(m, m),
            b_r: p1(m),
            w_xh: p2(m, n),
            w_hh: p2(m, m),
            b_h: p1(m),
            w_imp: p2(n, m),
            b_imp: p1(n),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_xz.value.ncols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hz.value.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.input_size(), self.hidden_size());
        if n == 0 || m == 0 {
            return Err(Error::Config("GRU sizes must be positive".into()));
        }
        let mats = [
            ("w_xz", &self.w_xz.value, (m, n)),
            ("w_hz", &self.w_hz.value, (m, m)),
            ("w_xr", &self.w_xr.value, (m, n)),
            ("w_hr", &self.w_hr.value, (m, m)),
            ("w_xh", &self.w_xh.value, (m, n)),
            ("w_hh", &self.w_hh.value, (m, m)),
            ("w_imp", &self.w_imp.value, (n, m)),
        ];
        for (name, w, expect) in mats {
            if w.dim() != expect {
                return Err(shape_err("GRU parameter", (name, expect), w.dim()));
            }
        }
        for (name, b, expect) in [
            ("b_z", &self.b_z.value, m),
            ("b_r", &self.b_r.value, m),
            ("b_h", &self.b_h.value, m),
            ("b_imp", &self.b_imp.value, n),
        ] {
            if b.len() != expect {
                return Err(shape_err("GRU parameter", (name, expect), b.len()));
            }
        }
        Ok(())
    }
}

impl<F: Real> Parameters<F> for GruParams<F> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(Slot<'_, F>)) {
        f(self.w_xz.slot(join(prefix, "w_xz")));
        f(self.w_hz.slot(join(prefix, "w_hz")));
        f(self.b_z.slot(join(prefix, "b_z")));
        f(self.w_xr.slot(join(prefix, "w_xr")));
        f(self.w_hr.slot(join(prefix, "w_hr")));
        f(self.b_r.slot(join(prefix, "b_r")));
        f(self.w_xh.slot(join(prefix, "w_xh")));
        f(self.w_hh.slot(join(prefix, "w_hh")));
        f(self.b_h.slot(join(prefix, "b_h")));
        f(self.w_imp.slot(join(prefix, "w_imp")));
        f(self.b_imp.slot(join(prefix, "b_imp")));
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[derive(Debug, Clone)]
struct StepCache<F> {
    u: Array2<F>,
    h_prev: Array2<F>,
    z: Array2<F>,
    r: Array2<F>,
    candidate: Array2<F>,
    reset_hidden: Array2<F>,
}

/// `x W^T + h V^T + b` for a batch of rows.
fn affine2<F: Real>(
    x: &ArrayView2<F>,
    w: &Array2<F>,
    h: &ArrayView2<F>,
    v: &Array2<F>,
    b: &Array1<F>,
) -> Array2<F> {
    let mut a = x.dot(&w.t());
    ndarray::linalg::general_mat_mul(F::one(), h, &v.t(), F::one(), &mut a);
    a += b;
    a
}

fn step_forward<F: Real>(
    p: &GruParams<F>,
    u: ArrayView2<F>,
    h_prev: ArrayView2<F>,
) -> (Array2<F>, StepCache<F>) {
    let z = affine2(&u, &p.w_xz.value, &h_prev, &p.w_hz.value, &p.b_z.value).mapv_into(sigmoid);
    let r = affine2(&u, &p.w_xr.value, &h_prev, &p.w_hr.value, &p.b_r.value).mapv_into(sigmoid);
    let reset_hidden = &r * &h_prev;
    let candidate = affine2(
        &u,
        &p.w_xh.value,
        &reset_hidden.view(),
        &p.w_hh.value,
        &p.b_h.value,
    )
    .mapv_into(|v| v.tanh());
    let mut h = candidate.clone();
    Zip::from(&mut h)
        .and(&z)
        .and(&h_prev)
        .for_each(|h, &z, &hp| *h = z * *h + (F::one() - z) * hp);
    let cache = StepCache {
        u: u.to_owned(),
        h_prev: h_prev.to_owned(),
        z,
        r,
        candidate,
        reset_hidden,
    };
    (h, cache)
}

/// Accumulates parameter gradients; returns `(grad_u, grad_h_prev)`.
fn step_backward<F: Real>(
    p: &mut GruParams<F>,
    c: &StepCache<F>,
    grad_h: &Array2<F>,
) -> (Array2<F>, Array2<F>) {
    let one = F::one();
    let mut grad_h_prev = grad_h * &c.z.mapv(|z| one - z);

    // candidate branch
    let mut da_h = grad_h * &c.z;
    Zip::from(&mut da_h)
        .and(&c.candidate)
        .for_each(|d, &hc| *d *= one - hc * hc);
    p.w_xh.grad += &da_h.t().dot(&c.u);
    p.w_hh.grad += &da_h.t().dot(&c.reset_hidden);
    p.b_h.grad += &da_h.sum_axis(Axis(0));
    let mut grad_u = da_h.dot(&p.w_xh.value);
    let grad_rh = da_h.dot(&p.w_hh.value);
    grad_h_prev += &(&grad_rh * &c.r);

    // reset gate
    let mut da_r = grad_rh * &c.h_prev;
    Zip::from(&mut da_r).and(&c.r).for_each(|d, &r| *d = *d * r * (one - r));
    p.w_xr.grad += &da_r.t().dot(&c.u);
    p.w_hr.grad += &da_r.t().dot(&c.h_prev);
    p.b_r.grad += &da_r.sum_axis(Axis(0));
    ndarray::linalg::general_mat_mul(one, &da_r, &p.w_xr.value, one, &mut grad_u);
    ndarray::linalg::general_mat_mul(one, &da_r, &p.w_hr.value, one, &mut grad_h_prev);

    // update gate
    let mut da_z = &c.candidate - &c.h_prev;
    Zip::from(&mut da_z)
        .and(grad_h)
        .and(&c.z)
        .for_each(|d, &g, &z| *d = *d * g * z * (one - z));
    p.w_xz.grad += &da_z.t().dot(&c.u);
    p.w_hz.grad += &da_z.t().dot(&c.h_prev);
    p.b_z.grad += &da_z.sum_axis(Axis(0));
    ndarray::linalg::general_mat_mul(one, &da_z, &p.w_xz.value, one, &mut grad_u);
    ndarray::linalg::general_mat_mul(one, &da_z, &p.w_hz.value, one, &mut grad_h_prev);

    (grad_u, grad_h_prev)
}

fn check_vec<F>(v: &ArrayView1<F>, len: usize, what: &'static str) -> Result<()> {
    if v.len() != len {
        return Err(shape_err(what, len, v.len()));
    }
    Ok(())
}

/// One GRU update `h_t = GRU(h_prev, u_t)` for a single series.
pub fn gru_cell<F: Real>(
    u: ArrayView1<F>,
    h_prev: ArrayView1<F>,
    params: &GruParams<F>,
) -> Result<Array1<F>> {
    check_vec(&u, params.input_size(), "gru_cell input")?;
    check_vec(&h_prev, params.hidden_size(), "gru_cell hidden")?;
    let u2 = u.insert_axis(Axis(0));
    let h2 = h_prev.insert_axis(Axis(0));
    let (h, _) = step_forward(params, u2, h2);
    Ok(h.index_axis_move(Axis(0), 0))
}

/// Backward of [`gru_cell`] for a batch of rows (`u` is `[batch, n]`,
/// `h_prev` is `[batch, m]`). Parameter gradients are accumulated into
/// `params`; returns `(grad_u, grad_h_prev)`.
pub fn gru_cell_backward<F: Real>(
    u: ArrayView2<F>,
    h_prev: ArrayView2<F>,
    params: &mut GruParams<F>,
    grad_h: &Array2<F>,
) -> Result<(Array2<F>, Array2<F>)> {
    let b = u.nrows();
    if u.ncols() != params.input_size() {
        return Err(shape_err("gru_cell_backward input", params.input_size(), u.ncols()));
    }
    if h_prev.dim() != (b, params.hidden_size()) || grad_h.dim() != h_prev.dim() {
        return Err(shape_err("gru_cell_backward hidden", (b, params.hidden_size()), grad_h.dim()));
    }
    let (_, cache) = step_forward(params, u, h_prev);
    Ok(step_backward(params, &cache, grad_h))
}

/// `x̃ = W_imp h_prev + b_imp`
pub fn estimate_next<F: Real>(h_prev: ArrayView1<F>, params: &GruParams<F>) -> Result<Array1<F>> {
    check_vec(&h_prev, params.hidden_size(), "estimate_next hidden")?;
    Ok(params.w_imp.value.dot(&h_prev) + &params.b_imp.value)
}

/// Full record of one imputation pass over a batch.
#[derive(Debug, Clone)]
pub struct ImputationTrace<F> {
    /// Merged series `u_t`, `[batch, time, dims]`.
    pub imputed: Array3<F>,
    /// Estimates `x̃_t`, `[batch, time, dims]`; the first step is always 0.
    pub estimates: Array3<F>,
    /// Hidden states `h_1..h_T`, `[batch, time, hidden]`.
    pub hidden: Array3<F>,
    pub mask: Array3<F>,
    /// Samples without a single observed value; their imputation free-runs from `h_0`.
    pub fully_missing: Vec<bool>,
}

impl<F: Real> ImputationTrace<F> {
    pub fn last_hidden(&self) -> Array2<F> {
        let t = self.hidden.len_of(Axis(1));
        self.hidden.index_axis(Axis(1), t - 1).to_owned()
    }
}

fn is_observed<F: Real>(m: F) -> bool {
    m > F::lit(0.5)
}

fn validate_series<F: Real>(
    values: &ArrayView3<F>,
    mask: &ArrayView3<F>,
    params: &GruParams<F>,
) -> Result<()> {
    if values.dim() != mask.dim() {
        return Err(shape_err("imputation mask", values.dim(), mask.dim()));
    }
    let (b, t, n) = values.dim();
    if n != params.input_size() {
        return Err(shape_err("imputation input dims", params.input_size(), n));
    }
    if b == 0 {
        return Err(Error::Empty("imputation batch".into()));
    }
    if t < 2 {
        return Err(Error::Config(format!("series must have at least 2 steps, got {t}")));
    }
    if let Some(i) = mask.iter().position(|&m| m != F::zero() && m != F::one()) {
        return Err(Error::Config(format!("mask entry {i} is not 0 or 1")));
    }
    Ok(())
}

/// Forward pass over a batch without keeping a backward cache.
pub fn impute_batch<F: Real>(
    values: ArrayView3<F>,
    mask: ArrayView3<F>,
    params: &GruParams<F>,
) -> Result<ImputationTrace<F>> {
    run_forward(values, mask, params, None)
}

/// Imputes one `[time, dims]` series. The returned trace has batch size 1.
pub fn impute_sequence<F: Real>(
    values: ArrayView2<F>,
    mask: ArrayView2<F>,
    params: &GruParams<F>,
) -> Result<ImputationTrace<F>> {
    impute_batch(values.insert_axis(Axis(0)), mask.insert_axis(Axis(0)), params)
}

fn run_forward<F: Real>(
    values: ArrayView3<F>,
    mask: ArrayView3<F>,
    params: &GruParams<F>,
    mut steps: Option<&mut Vec<StepCache<F>>>,
) -> Result<ImputationTrace<F>> {
    params.validate()?;
    validate_series(&values, &mask, params)?;
    let (b, t_len, n) = values.dim();
    let m = params.hidden_size();
    let mut imputed = Array3::<F>::zeros((b, t_len, n));
    let mut estimates = Array3::<F>::zeros((b, t_len, n));
    let mut hidden = Array3::<F>::zeros((b, t_len, m));
    let mut h = Array2::<F>::zeros((b, m));
    let mut estimate = Array2::<F>::zeros((b, n));
    for t in 0..t_len {
        let x_t = values.index_axis(Axis(1), t);
        let m_t = mask.index_axis(Axis(1), t);
        let mut u = estimate.clone();
        Zip::from(&mut u)
            .and(&x_t)
            .and(&m_t)
            .for_each(|u, &x, &mv| {
                if is_observed(mv) {
                    *u = x;
                }
            });
        estimates.index_axis_mut(Axis(1), t).assign(&estimate);
        imputed.index_axis_mut(Axis(1), t).assign(&u);
        let (h_next, cache) = step_forward(params, u.view(), h.view());
        if let Some(s) = steps.as_deref_mut() {
            s.push(cache);
        }
        hidden.index_axis_mut(Axis(1), t).assign(&h_next);
        h = h_next;
        if t + 1 < t_len {
            estimate = h.dot(&params.w_imp.value.t()) + &params.b_imp.value;
        }
    }
    let fully_missing = mask
        .outer_iter()
        .map(|sample| !sample.iter().any(|&mv| is_observed(mv)))
        .collect();
    Ok(ImputationTrace {
        imputed,
        estimates,
        hidden,
        mask: mask.to_owned(),
        fully_missing,
    })
}

#[derive(Debug, Clone)]
struct ImputerCache<F> {
    steps: Vec<StepCache<F>>,
    mask: Array3<F>,
    hidden: Array3<F>,
}

/// GRU imputer with a backward pass through the unrolled recurrence.
#[derive(Debug, Clone)]
pub struct TemporalImputer<F: Real> {
    pub params: GruParams<F>,
    cache: Option<ImputerCache<F>>,
}

impl<F: Real> TemporalImputer<F> {
    pub fn new(params: GruParams<F>) -> Self {
        Self { params, cache: None }
    }

    pub fn forward(&mut self, values: &Array3<F>, mask: &Array3<F>) -> Result<ImputationTrace<F>> {
        let mut steps = Vec::with_capacity(values.len_of(Axis(1)));
        let trace = run_forward(values.view(), mask.view(), &self.params, Some(&mut steps))?;
        self.cache = Some(ImputerCache {
            steps,
            mask: trace.mask.clone(),
            hidden: trace.hidden.clone(),
        });
        Ok(trace)
    }

    /// Backpropagation through time.
    ///
    /// `grad_imputed` and `grad_estimates` are the loss gradients with respect
    /// to the trace's `imputed` and `estimates`; `grad_last_hidden` is an
    /// optional gradient on `h_T`. Parameter gradients are accumulated.
    pub fn backward(
        &mut self,
        grad_imputed: &Array3<F>,
        grad_estimates: &Array3<F>,
        grad_last_hidden: Option<&Array2<F>>,
    ) -> Result<()> {
        let cache = self.cache.take().ok_or(Error::MissingCache("temporal imputer"))?;
        let (b, t_len, n) = cache.mask.dim();
        let m = self.params.hidden_size();
        for (g, what) in [(grad_imputed, "grad_imputed"), (grad_estimates, "grad_estimates")] {
            if g.dim() != (b, t_len, n) {
                return Err(Error::Shape {
                    context: "imputer backward",
                    expected: format!("{what} {:?}", (b, t_len, n)),
                    actual: format!("{:?}", g.dim()),
                });
            }
        }
        let mut grad_h = match grad_last_hidden {
            Some(g) if g.dim() == (b, m) => g.clone(),
            Some(g) => return Err(shape_err("imputer grad_last_hidden", (b, m), g.dim())),
            None => Array2::zeros((b, m)),
        };
        let one = F::one();
        for t in (0..t_len).rev() {
            let (mut grad_u, mut grad_h_prev) = step_backward(&mut self.params, &cache.steps[t], &grad_h);
            grad_u += &grad_imputed.index_axis(Axis(1), t);
            if t > 0 {
                let mut grad_est = grad_estimates.index_axis(Axis(1), t).to_owned();
                Zip::from(&mut grad_est)
                    .and(&grad_u)
                    .and(cache.mask.index_axis(Axis(1), t))
                    .for_each(|ge, &gu, &mv| {
                        if !is_observed(mv) {
                            *ge += gu;
                        }
                    });
                let h_prev = cache.hidden.slice(s![.., t - 1, ..]);
                self.params.w_imp.grad += &grad_est.t().dot(&h_prev);
                self.params.b_imp.grad += &grad_est.sum_axis(Axis(0));
                ndarray::linalg::general_mat_mul(one, &grad_est, &self.params.w_imp.value, one, &mut grad_h_prev);
            }
            grad_h = grad_h_prev;
        }
        Ok(())
    }
}

impl<F: Real> Parameters<F> for TemporalImputer<F> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(Slot<'_, F>)) {
        self.params.visit(prefix, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_halve_hidden() {
        let p = GruParams::<f64>::zeros(2, 3);
        let v = array![0.4, -0.8, 1.0];
        let h = gru_cell(array![5.0, -1.0].view(), v.view(), &p).unwrap();
        assert_eq!(h, &v * 0.5);
        let h0 = gru_cell(array![5.0, -1.0].view(), Array1::zeros(3).view(), &p).unwrap();
        assert!(h0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn estimate_is_bias_for_zero_weights_or_zero_hidden() {
        let mut p = GruParams::<f64>::zeros(2, 3);
        p.b_imp.value = array![1.5, -2.0];
        let e = estimate_next(array![0.3, 0.2, 0.1].view(), &p).unwrap();
        assert_eq!(e, array![1.5, -2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = GruParams::<f64>::new(2, 3, &mut rng);
        p.b_imp.value = array![0.25, 0.5];
        assert_eq!(estimate_next(Array1::zeros(3).view(), &p).unwrap(), array![0.25, 0.5]);
    }

    #[test]
    fn full_mask_passes_values_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = GruParams::<f64>::new(2, 4, &mut rng);
        let x = Array::from_shape_fn((6, 2), |(t, j)| (t as f64 * 0.37 - j as f64).sin());
        let m = Array2::ones((6, 2));
        let trace = impute_sequence(x.view(), m.view(), &p).unwrap();
        assert_eq!(trace.imputed.index_axis(Axis(0), 0), x);
        assert_eq!(trace.fully_missing, vec![false]);
    }

    #[test]
    fn all_missing_zero_params_stays_zero() {
        let p = GruParams::<f64>::zeros(1, 3);
        let x = Array2::from_elem((5, 1), 7.0);
        let m = Array2::zeros((5, 1));
        let trace = impute_sequence(x.view(), m.view(), &p).unwrap();
        assert!(trace.imputed.iter().all(|&v| v == 0.0));
        assert!(trace.hidden.iter().all(|&v| v == 0.0));
        assert_eq!(trace.fully_missing, vec![true]);
    }

    #[test]
    fn missing_storage_is_inert() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = GruParams::<f64>::new(1, 3, &mut rng);
        let m = array![[1.0], [0.0], [1.0], [0.0]];
        let a = array![[0.5], [0.0], [-0.2], [0.0]];
        let b = array![[0.5], [f64::NAN], [-0.2], [1e6]];
        let ta = impute_sequence(a.view(), m.view(), &p).unwrap();
        let tb = impute_sequence(b.view(), m.view(), &p).unwrap();
        assert_eq!(ta.imputed, tb.imputed);
        assert_eq!(ta.hidden, tb.hidden);
        assert_eq!(ta.estimates, tb.estimates);
    }

    #[test]
    fn rejects_bad_shapes() {
        let p = GruParams::<f64>::zeros(1, 2);
        let x = Array2::zeros((1, 1));
        assert!(impute_sequence(x.view(), x.view(), &p).is_err(), "T=1");
        let x = Array2::zeros((4, 2));
        assert!(impute_sequence(x.view(), x.view(), &p).is_err(), "n mismatch");
        assert!(gru_cell(array![1.0, 2.0].view(), array![0.0, 0.0].view(), &p).is_err());
        let mut imp = TemporalImputer::new(p);
        let g = Array3::zeros((1, 4, 1));
        assert!(matches!(imp.backward(&g, &g, None), Err(Error::MissingCache(_))));
    }
}
