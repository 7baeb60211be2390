//! Joint training of the imputer and classifier.
//!
//! The objective is `α · L_cls + β · L_imp` where `L_cls` is the mean
//! softmax cross-entropy over the batch and `L_imp` is the squared error of
//! the next-step estimates at observed positions of steps `2..T`, summed
//! over positions and averaged over the batch.

use std::time::Instant;

use log::{debug, warn};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, stack_batch, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::model::ItscModel;
use crate::nn::{softmax, softmax_cross_entropy, Adam, AdamConfig, BnMode, Parameters, Real};

/// Probability floor applied before taking a logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Classification weight.
    pub alpha: f64,
    /// Imputation weight.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative (alpha={}, beta={})",
                self.alpha, self.beta
            )));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::Config("alpha and beta cannot both be zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_imp: f64,
    pub l_cls: f64,
    pub l_total: f64,
    pub batch_size: usize,
}

/// Masked next-step squared error, averaged over the batch.
///
/// All arrays are `[batch, time, dims]`; the first time step is excluded.
pub fn imputation_loss<F: Real>(values: ArrayView3<F>, estimates: ArrayView3<F>, mask: ArrayView3<F>) -> F {
    imputation_loss_with_grad(values, estimates, mask).0
}

/// Loss and its gradient with respect to `estimates`.
pub fn imputation_loss_with_grad<F: Real>(
    values: ArrayView3<F>,
    estimates: ArrayView3<F>,
    mask: ArrayView3<F>,
) -> (F, Array3<F>) {
    let q = F::from_usize(values.len_of(Axis(0)).max(1)).expect("batch fits");
    let mut grad = Array3::<F>::zeros(values.raw_dim());
    let mut sum = F::zero();
    let mut observed = 0usize;
    let tail = ndarray::s![.., 1.., ..];
    let two = F::lit(2.0);
    Zip::from(grad.slice_mut(tail))
        .and(values.slice(tail))
        .and(estimates.slice(tail))
        .and(mask.slice(tail))
        .for_each(|g, &x, &e, &m| {
            if m > F::lit(0.5) {
                let d = x - e;
                sum += d * d;
                *g = -two * d / q;
                observed += 1;
            }
        });
    if observed == 0 {
        debug!("imputation loss: no observed positions after the first step");
    }
    (sum / q, grad)
}

/// Mean negative log-probability of the true labels; probabilities are
/// floored at [`PROB_CLAMP`].
pub fn classification_loss<F: Real>(labels: &[usize], probabilities: ArrayView2<F>) -> Result<F> {
    let (q, classes) = probabilities.dim();
    if labels.len() != q {
        return Err(crate::error::shape_err("classification labels", q, labels.len()));
    }
    let floor = F::lit(PROB_CLAMP);
    let mut total = F::zero();
    for (row, &y) in probabilities.axis_iter(Axis(0)).zip(labels) {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let p = row[y];
        if p < floor {
            warn!("probability {p} of the true class clamped to {PROB_CLAMP}");
        }
        total -= p.max(floor).ln();
    }
    Ok(total / F::from_usize(q.max(1)).expect("batch fits"))
}

pub fn total_loss(l_cls: f64, l_imp: f64, weights: LossWeights) -> f64 {
    weights.alpha * l_cls + weights.beta * l_imp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch averages (weighted by batch size) over the training batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub l_imp: f64,
    pub l_cls: f64,
    pub l_total: f64,
    pub train_acc: f64,
    pub seconds: f64,
}

impl EpochReport {
    pub const CSV_HEADER: &'static str = "epoch,l_imp,l_cls,l_total,train_acc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.l_imp, self.l_cls, self.l_total, self.train_acc
        )
    }
}

/// Loss history as CSV text.
pub fn history_csv(history: &[EpochReport]) -> String {
    let mut out = String::from(EpochReport::CSV_HEADER);
    out.push('\n');
    for e in history {
        out.push_str(&e.csv_row());
        out.push('\n');
    }
    out
}

/// One optimization step on a batch. Returns the loss report and the
/// batch probabilities.
pub fn train_step<F: Real>(
    model: &mut ItscModel<F>,
    optimizer: &mut Adam<F>,
    samples: &[&TimeSeriesSample],
    weights: LossWeights,
) -> Result<(LossReport, Array2<F>)> {
    let (values, mask, labels) = stack_batch::<F>(samples);
    model.zero_grad();
    let out = model.forward(&values, &mask, BnMode::Train)?;
    let ce = softmax_cross_entropy(out.logits.view(), &labels)?;
    let (l_imp, grad_est) = match &out.trace {
        Some(trace) => {
            let (l, g) = imputation_loss_with_grad(values.view(), trace.estimates.view(), mask.view());
            (l.to_f64_lossy(), Some(g))
        }
        None => (0.0, None),
    };
    let l_cls = ce.loss.to_f64_lossy();
    let report = LossReport {
        l_imp,
        l_cls,
        l_total: total_loss(l_cls, l_imp, weights),
        batch_size: samples.len(),
    };
    if !report.l_total.is_finite() {
        return Err(Error::NonFinite {
            context: "training loss".into(),
            index: 0,
        });
    }
    let grad_logits = ce.grad_logits.mapv(|g| g * F::lit(weights.alpha));
    let grad_est = grad_est.map(|g| g.mapv_into(|v| v * F::lit(weights.beta)));
    model.backward(&grad_logits, grad_est.as_ref())?;
    optimizer.step(model)?;
    Ok((report, ce.probabilities))
}

fn argmax<F: Real>(row: ndarray::ArrayView1<F>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs the full training loop; `on_epoch` sees each epoch report as it
/// completes. A non-finite loss aborts with the offending epoch and batch.
pub fn train<F: Real>(
    model: &mut ItscModel<F>,
    train_set: &[TimeSeriesSample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let mut optimizer = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    });
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let (mut l_imp, mut l_cls, mut l_total) = (0.0, 0.0, 0.0);
        let mut correct = 0usize;
        let batches = batch_iter(train_set.len(), config.batch_size, config.seed, epoch as u64);
        for (b, idx) in batches.iter().enumerate() {
            let samples: Vec<&TimeSeriesSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (report, probs) = train_step(model, &mut optimizer, &samples, config.weights)
                .map_err(|e| match e {
                    Error::NonFinite { context, index } => Error::NonFinite {
                        context: format!("{context} (epoch {}, batch {b})", epoch + 1),
                        index,
                    },
                    other => other,
                })?;
            let w = report.batch_size as f64;
            l_imp += report.l_imp * w;
            l_cls += report.l_cls * w;
            l_total += report.l_total * w;
            correct += probs
                .axis_iter(Axis(0))
                .zip(&samples)
                .filter(|(p, s)| argmax(*p) == s.label)
                .count();
        }
        let n = train_set.len() as f64;
        let report = EpochReport {
            epoch: epoch + 1,
            l_imp: l_imp / n,
            l_cls: l_cls / n,
            l_total: l_total / n,
            train_acc: correct as f64 / n,
            seconds: started.elapsed().as_secs_f64(),
        };
        debug!("epoch {}: {}", report.epoch, report.csv_row());
        on_epoch(&report);
        history.push(report);
    }
    Ok(history)
}

#[derive(Debug, Clone)]
pub struct Predictions<F> {
    pub probabilities: Array2<F>,
    pub features: Array2<F>,
}

/// Eval-mode probabilities and pre-logit features, processed in chunks.
pub fn predict<F: Real>(
    model: &mut ItscModel<F>,
    samples: &[TimeSeriesSample],
    chunk: usize,
) -> Result<Predictions<F>> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to predict".into()));
    }
    let classes = model.spec.num_classes;
    let mut probabilities = Array2::<F>::zeros((samples.len(), classes));
    let mut features = Array2::<F>::zeros((samples.len(), model.spec.feature_dim()));
    for (c, block) in samples.chunks(chunk.max(1)).enumerate() {
        let refs: Vec<&TimeSeriesSample> = block.iter().collect();
        let (values, mask, _) = stack_batch::<F>(&refs);
        let out = model.forward(&values, &mask, BnMode::Eval)?;
        let start = c * chunk.max(1);
        let rows = ndarray::s![start..start + block.len(), ..];
        probabilities.slice_mut(rows).assign(&softmax(out.logits.view()));
        features.slice_mut(rows).assign(&out.features);
    }
    Ok(Predictions {
        probabilities,
        features,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub num_samples: usize,
}

impl MetricsReport {
    /// Metrics from true and predicted labels. Classes absent from both are
    /// skipped in the macro averages; a class that is never predicted has
    /// precision 0.
    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::Empty("cannot compute metrics of an empty set".into()));
        }
        if truth.len() != predicted.len() {
            return Err(crate::error::shape_err("metrics", truth.len(), predicted.len()));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: t.max(p),
                    classes: num_classes,
                });
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        let (mut p_sum, mut r_sum, mut f_sum, mut present) = (0.0, 0.0, 0.0, 0usize);
        for c in 0..num_classes {
            let tp = confusion[c][c] as f64;
            let actual: usize = confusion[c].iter().sum();
            let predicted_c: usize = confusion.iter().map(|row| row[c]).sum();
            if actual == 0 && predicted_c == 0 {
                continue;
            }
            present += 1;
            let precision = if predicted_c == 0 { 0.0 } else { tp / predicted_c as f64 };
            let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            p_sum += precision;
            r_sum += recall;
            f_sum += f1;
        }
        let k = present.max(1) as f64;
        Ok(Self {
            accuracy: correct as f64 / truth.len() as f64,
            macro_precision: p_sum / k,
            macro_recall: r_sum / k,
            macro_f1: f_sum / k,
            confusion,
            num_samples: truth.len(),
        })
    }

    /// Aligned plain-text rendering.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<16}{:>10}\n", "metric", "value"));
        for (k, v) in [
            ("accuracy", self.accuracy),
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_f1", self.macro_f1),
        ] {
            out.push_str(&format!("{k:<16}{v:>10.4}\n"));
        }
        out.push_str(&format!("{:<16}{:>10}\n", "samples", self.num_samples));
        out.push_str("confusion (rows: true, cols: predicted)\n");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>6}")).collect();
            out.push_str(&cells.join(""));
            out.push('\n');
        }
        out
    }
}

/// Eval-mode metrics over `samples`.
pub fn evaluate<F: Real>(model: &mut ItscModel<F>, samples: &[TimeSeriesSample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let preds = predict(model, samples, 128)?;
    let predicted: Vec<usize> = preds.probabilities.axis_iter(Axis(0)).map(argmax).collect();
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    MetricsReport::from_predictions(&truth, &predicted, model.spec.num_classes)
}
