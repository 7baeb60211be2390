//! Softmax and softmax cross-entropy.

use ndarray::{Array2, ArrayView2, Axis};

use super::Real;
use crate::error::{Error, Result};

/// Row-wise softmax, stabilized by subtracting the row maximum.
pub fn softmax<F: Real>(logits: ArrayView2<F>) -> Array2<F> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: F = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Output of [`softmax_cross_entropy`].
#[derive(Debug, Clone)]
pub struct CrossEntropy<F> {
    /// Mean negative log-likelihood over the batch.
    pub loss: F,
    /// `(p - onehot) / batch`
    pub grad_logits: Array2<F>,
    pub probabilities: Array2<F>,
}

pub fn softmax_cross_entropy<F: Real>(
    logits: ArrayView2<F>,
    labels: &[usize],
) -> Result<CrossEntropy<F>> {
    let (batch, classes) = logits.dim();
    if labels.len() != batch {
        return Err(crate::error::shape_err("cross-entropy labels", batch, labels.len()));
    }
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let probabilities = softmax(logits);
    let q = F::from_usize(batch).expect("batch size fits");
    let mut loss = F::zero();
    for (row, &y) in logits.axis_iter(Axis(0)).zip(labels) {
        // log p_y = z_y - max - log(sum exp(z - max)), exact even when p_y underflows.
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
        loss += lse - row[y];
    }
    let mut grad_logits = probabilities.clone();
    for (mut row, &y) in grad_logits.axis_iter_mut(Axis(0)).zip(labels) {
        row[y] -= F::one();
    }
    grad_logits.mapv_inplace(|v| v / q);
    Ok(CrossEntropy {
        loss: loss / q,
        grad_logits,
        probabilities,
    })
}
