//! The end-to-end classifier: imputer, feature learner and head.

use ndarray::{Array2, Array3, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::imputation::{GruParams, ImputationTrace, TemporalImputer};
use crate::msfl::{Msfl, MsflSpec};
use crate::nn::{join, BnMode, Linear, Parameters, Real, Slot};

/// Which parts of the network are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// GRU imputation feeding the multi-scale feature learner.
    Full,
    /// No imputer: missing positions are filled with zeros.
    ZeroFill,
    /// No feature learner: a linear classifier on the last GRU hidden state.
    LinearHead,
}

impl Variant {
    pub fn uses_imputer(self) -> bool {
        !matches!(self, Variant::ZeroFill)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dims: usize,
    pub hidden_size: usize,
    pub num_classes: usize,
    pub msfl: MsflSpec,
    pub variant: Variant,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dims == 0 || self.hidden_size == 0 {
            return Err(Error::Config("input_dims and hidden_size must be positive".into()));
        }
        if self.msfl.input_channels != self.input_dims || self.msfl.num_classes != self.num_classes {
            return Err(Error::Config(
                "msfl input_channels/num_classes disagree with the model".into(),
            ));
        }
        self.msfl.validate()
    }

    /// Width of the vector the classifier head sees.
    pub fn feature_dim(&self) -> usize {
        match self.variant {
            Variant::LinearHead => self.hidden_size,
            _ => self.msfl.feature_dim(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    pub logits: Array2<F>,
    /// Pre-logit features, `[batch, feature_dim]`.
    pub features: Array2<F>,
    pub trace: Option<ImputationTrace<F>>,
}

#[derive(Debug, Clone)]
pub struct ItscModel<F: Real> {
    pub spec: ModelSpec,
    pub imputer: Option<TemporalImputer<F>>,
    pub msfl: Option<Msfl<F>>,
    pub linear_head: Option<Linear<F>>,
    pending: Option<(usize, usize, usize)>,
}

/// `[batch, time, dims]` <-> `[batch, dims, time]`
fn swap_time_channels<F: Real>(x: &Array3<F>) -> Array3<F> {
    x.view().permuted_axes([0, 2, 1]).as_standard_layout().into_owned()
}

fn zero_fill<F: Real>(values: &Array3<F>, mask: &Array3<F>) -> Array3<F> {
    let mut out = Array3::zeros(values.raw_dim());
    Zip::from(&mut out)
        .and(values)
        .and(mask)
        .for_each(|o, &x, &m| {
            if m > F::lit(0.5) {
                *o = x;
            }
        });
    out
}

impl<F: Real> ItscModel<F> {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let imputer = spec
            .variant
            .uses_imputer()
            .then(|| TemporalImputer::new(GruParams::new(spec.input_dims, spec.hidden_size, rng)));
        let (msfl, linear_head) = match spec.variant {
            Variant::LinearHead => (None, Some(Linear::new(spec.hidden_size, spec.num_classes, rng))),
            _ => (Some(Msfl::new(spec.msfl, rng)?), None),
        };
        Ok(Self {
            spec,
            imputer,
            msfl,
            linear_head,
            pending: None,
        })
    }

    /// Forward a batch of `[batch, time, dims]` values with a matching mask.
    pub fn forward(&mut self, values: &Array3<F>, mask: &Array3<F>, mode: BnMode) -> Result<ForwardOutput<F>> {
        if values.dim() != mask.dim() {
            return Err(shape_err("model mask", values.dim(), mask.dim()));
        }
        if values.len_of(Axis(2)) != self.spec.input_dims {
            return Err(shape_err("model input dims", self.spec.input_dims, values.len_of(Axis(2))));
        }
        let out = match self.spec.variant {
            Variant::Full => {
                let imputer = self.imputer.as_mut().expect("full model has an imputer");
                let trace = imputer.forward(values, mask)?;
                let input = swap_time_channels(&trace.imputed);
                let msfl = self.msfl.as_mut().expect("full model has msfl");
                let out = msfl.forward(&input, mode)?;
                ForwardOutput {
                    logits: out.logits,
                    features: out.pooled,
                    trace: Some(trace),
                }
            }
            Variant::ZeroFill => {
                let input = swap_time_channels(&zero_fill(values, mask));
                let msfl = self.msfl.as_mut().expect("zero-fill model has msfl");
                let out = msfl.forward(&input, mode)?;
                ForwardOutput {
                    logits: out.logits,
                    features: out.pooled,
                    trace: None,
                }
            }
            Variant::LinearHead => {
                let imputer = self.imputer.as_mut().expect("linear-head model has an imputer");
                let trace = imputer.forward(values, mask)?;
                let last = trace.last_hidden();
                let head = self.linear_head.as_mut().expect("linear head present");
                let logits = head.forward(&last)?;
                ForwardOutput {
                    logits,
                    features: last,
                    trace: Some(trace),
                }
            }
        };
        self.pending = Some(values.dim());
        Ok(out)
    }

    /// Backpropagates the loss gradients of the last forward pass.
    ///
    /// `grad_estimates` is the gradient with respect to the imputer's
    /// estimates (the imputation-loss path); ignored by the zero-fill variant.
    pub fn backward(&mut self, grad_logits: &Array2<F>, grad_estimates: Option<&Array3<F>>) -> Result<()> {
        let input_dim = self.pending.take().ok_or(Error::MissingCache("model"))?;
        match self.spec.variant {
            Variant::Full => {
                let msfl = self.msfl.as_mut().expect("msfl");
                let grad_input = msfl.backward(grad_logits)?;
                let grad_imputed = swap_time_channels(&grad_input);
                let zeros;
                let ge = match grad_estimates {
                    Some(g) => g,
                    None => {
                        zeros = Array3::zeros(grad_imputed.raw_dim());
                        &zeros
                    }
                };
                self.imputer
                    .as_mut()
                    .expect("imputer")
                    .backward(&grad_imputed, ge, None)
            }
            Variant::ZeroFill => {
                self.msfl.as_mut().expect("msfl").backward(grad_logits)?;
                Ok(())
            }
            Variant::LinearHead => {
                let grad_h = self.linear_head.as_mut().expect("head").backward(grad_logits)?;
                let zeros = Array3::zeros(input_dim);
                let ge = grad_estimates.unwrap_or(&zeros);
                self.imputer
                    .as_mut()
                    .expect("imputer")
                    .backward(&zeros, ge, Some(&grad_h))
            }
        }
    }
}

impl<F: Real> Parameters<F> for ItscModel<F> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(Slot<'_, F>)) {
        if let Some(imp) = self.imputer.as_mut() {
            imp.visit(&join(prefix, "imputer"), f);
        }
        if let Some(msfl) = self.msfl.as_mut() {
            msfl.visit(&join(prefix, "msfl"), f);
        }
        if let Some(head) = self.linear_head.as_mut() {
            head.visit(&join(prefix, "linear_head"), f);
        }
    }
}
