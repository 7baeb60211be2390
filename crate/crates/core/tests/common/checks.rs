//! Single randomized instances of the oracle and masking checks. Each
//! function draws one instance from `r` and returns the measured quantity,
//! so the same code backs the integration tests and the acceptance run.

use ndarray::{s, Array1, Array2, Array3, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use itsc_core::data::{znormalize, DatasetBundle, TimeSeriesSample};
use itsc_core::imputation::{gru_cell, impute_batch, impute_sequence};
use itsc_core::model::{ItscModel, ModelSpec, Variant};
use itsc_core::msfl::MsflSpec;
use itsc_core::nn::{conv1d_forward, softmax_cross_entropy, BnMode, ConvSpec, Parameters};
use itsc_core::training::{imputation_loss, imputation_loss_with_grad};

use super::{conv_direct, gru_cell_scalar, impute_scalar, max_abs_diff, random, random_gru, random_mask, FD_STEP};

/// Max deviation of the library convolution from the loop oracle.
pub fn conv_oracle_deviation(r: &mut ChaCha8Rng) -> f64 {
    let batch = r.gen_range(1..=3);
    let cin = r.gen_range(1..=4);
    let cout = r.gen_range(1..=4);
    let f = 2 * r.gen_range(0..=4) + 1;
    let d = r.gen_range(1..=3);
    // Lengths both shorter and longer than the receptive field.
    let len = r.gen_range(1..=24);
    let spec = ConvSpec::new(cin, cout, f, d).unwrap();
    let x = random((batch, cin, len), r);
    let w = random((cout, cin, f), r);
    let b = random(cout, r);
    let got = conv1d_forward(x.view(), &spec, w.view(), b.view()).unwrap();
    max_abs_diff(&got, &conv_direct(&x, &w, &b, d))
}

/// Max deviation of one GRU step from the scalar reference.
pub fn gru_cell_oracle_deviation(r: &mut ChaCha8Rng) -> f64 {
    let n = r.gen_range(1..=3);
    let m = r.gen_range(1..=5);
    let p = random_gru(n, m, r);
    let u: Array1<f64> = random(n, r);
    let h: Array1<f64> = random(m, r);
    let got = gru_cell(u.view(), h.view(), &p).unwrap();
    let want = Array1::from(gru_cell_scalar(&p, u.as_slice().unwrap(), h.as_slice().unwrap()));
    max_abs_diff(&got, &want)
}

/// Max deviation of the imputed values, estimates and hidden states of a
/// sequence with `2 <= T <= 4` from the scalar recurrence.
pub fn imputation_oracle_deviation(r: &mut ChaCha8Rng) -> f64 {
    let t = r.gen_range(2..=4);
    let n = r.gen_range(1..=3);
    let m = r.gen_range(1..=4);
    let p = random_gru(n, m, r);
    let x: Array2<f64> = random((t, n), r);
    let mask = random_mask((1, t, n), 0.5, r).index_axis_move(Axis(0), 0);
    let trace = impute_sequence(x.view(), mask.view(), &p).unwrap();
    let (us, ests, hs) = impute_scalar(&p, &x, &mask);
    let mut worst = 0.0f64;
    for step in 0..t {
        for j in 0..n {
            worst = worst.max((trace.imputed[[0, step, j]] - us[step][j]).abs());
            worst = worst.max((trace.estimates[[0, step, j]] - ests[step][j]).abs());
        }
        for k in 0..m {
            worst = worst.max((trace.hidden[[0, step, k]] - hs[step][k]).abs());
        }
    }
    worst
}

/// Replaces every masked-out entry of `x` with junk.
pub fn scramble_missing(x: &Array3<f64>, mask: &Array3<f64>, r: &mut impl Rng) -> Array3<f64> {
    let mut out = x.clone();
    Zip::from(&mut out).and(mask).for_each(|v, &m| {
        if m == 0.0 {
            *v = r.gen_range(-1e3..1e3);
        }
    });
    out
}

/// Whether the imputation loss has zero gradient at, and is unchanged by
/// perturbations of, every masked position (and the first time step).
pub fn imputation_loss_ignores_masked(r: &mut ChaCha8Rng) -> bool {
    let dims = (r.gen_range(1..=3), r.gen_range(2..=8), r.gen_range(1..=3));
    let x: Array3<f64> = random(dims, r);
    let est: Array3<f64> = random(dims, r);
    let mask = random_mask(dims, 0.5, r);
    let base = imputation_loss(x.view(), est.view(), mask.view());
    let (_, grad) = imputation_loss_with_grad(x.view(), est.view(), mask.view());
    for (idx, &m) in mask.indexed_iter() {
        if m != 0.0 && idx.1 != 0 {
            continue;
        }
        if grad[idx] != 0.0 {
            return false;
        }
        for h in [FD_STEP, 1.0, -1e3] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut ep = est.clone();
            ep[idx] += h;
            if imputation_loss(xp.view(), est.view(), mask.view()) != base
                || imputation_loss(x.view(), ep.view(), mask.view()) != base
            {
                return false;
            }
        }
    }
    true
}

/// Whether a fully observed batch comes out of the imputer bit-identical.
pub fn full_mask_passes_through(r: &mut ChaCha8Rng) -> bool {
    let (b, t, n) = (r.gen_range(1..=4), r.gen_range(2..=10), r.gen_range(1..=3));
    let p = random_gru(n, r.gen_range(1..=5), r);
    let x: Array3<f64> = random((b, t, n), r).mapv(|v| v * 1e3);
    let tr = impute_batch(x.view(), Array3::ones((b, t, n)).view(), &p).unwrap();
    tr.imputed.iter().zip(&x).all(|(u, v)| u.to_bits() == v.to_bits())
}

/// Whether junk stored at missing positions leaves the imputer trace, the
/// imputation loss and the normalization statistics untouched.
pub fn stored_missing_values_ignored(r: &mut ChaCha8Rng) -> bool {
    let (t, n) = (r.gen_range(2..=10), r.gen_range(1..=3));
    let p = random_gru(n, r.gen_range(1..=5), r);
    let mask = random_mask((1, t, n), 0.5, r);
    let x = &random((1, t, n), r) * &mask;
    let junk = scramble_missing(&x, &mask, r);

    let a = impute_sequence(x.slice(s![0, .., ..]), mask.slice(s![0, .., ..]), &p).unwrap();
    let b = impute_sequence(junk.slice(s![0, .., ..]), mask.slice(s![0, .., ..]), &p).unwrap();
    let same_trace = a.imputed == b.imputed && a.estimates == b.estimates && a.hidden == b.hidden;
    let same_loss = imputation_loss(x.view(), a.estimates.view(), mask.view())
        == imputation_loss(junk.view(), a.estimates.view(), mask.view());

    let sample = |values: &Array3<f64>| TimeSeriesSample {
        id: "s".into(),
        values: values.slice(s![0, .., ..]).to_owned(),
        mask: mask.slice(s![0, .., ..]).mapv(|m| m as u8),
        label: 0,
    };
    let norm = |values: &Array3<f64>| {
        znormalize(DatasetBundle::new("t", vec![sample(values)], vec![], vec!["a".into()]).unwrap())
    };
    let (na, nb) = (norm(&x), norm(&junk));
    let same_norm = na.train[0].values == nb.train[0].values && na.normalization == nb.normalization;
    same_trace && same_loss && same_norm
}

/// A small model with every trainable value drawn away from the defaults.
pub fn generic_model(r: &mut impl Rng, variant: Variant) -> ItscModel<f64> {
    let msfl = MsflSpec {
        num_layers: 2,
        scales_per_layer: 2,
        dilation: 2,
        final_dilation: 1,
        branch_channels: 3,
        num_classes: 3,
        input_channels: 2,
    };
    let spec = ModelSpec {
        input_dims: 2,
        hidden_size: 4,
        num_classes: 3,
        msfl,
        variant,
    };
    let mut model = ItscModel::new(spec, r).unwrap();
    let generic: Vec<f64> = (0..model.num_trainable()).map(|_| r.gen_range(-0.8..0.8)).collect();
    model.set_flat_values(&generic);
    model
}

/// ‖∂L_cls/∂θ_GRU‖∞ with the imputation loss switched off.
pub fn classification_grad_on_imputer(model: &mut ItscModel<f64>, x: &Array3<f64>, mask: &Array3<f64>) -> f64 {
    model.zero_grad();
    let out = model.forward(x, mask, BnMode::Train).unwrap();
    let ce = softmax_cross_entropy(out.logits.view(), &[0, 1, 2]).unwrap();
    model.backward(&ce.grad_logits, None).unwrap();
    model.imputer.as_mut().unwrap().flat_grads().iter().fold(0.0, |a, g| a.max(g.abs()))
}

/// The classification gradient on the imputer for a batch with exactly one
/// missing value (never at the first time step).
pub fn linkage_instance(r: &mut ChaCha8Rng) -> f64 {
    let mut model = generic_model(r, Variant::Full);
    let mut mask = Array3::ones((3, 12, 2));
    mask[[r.gen_range(0..3), r.gen_range(1..12), r.gen_range(0..2)]] = 0.0;
    let x = &random((3, 12, 2), r) * &mask;
    classification_grad_on_imputer(&mut model, &x, &mask)
}
