//! Adam with bias correction.

use super::{first_non_finite, Parameters, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub step_count: u64,
    pub first_moment: Vec<F>,
    pub second_moment: Vec<F>,
    pub config: AdamConfig,
}

impl<F: Real> AdamState<F> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            step_count: 0,
            first_moment: vec![F::zero(); len],
            second_moment: vec![F::zero(); len],
            config,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn apply(&mut self, params: &mut [F], grads: &[F]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(crate::error::shape_err(
                "adam step",
                self.first_moment.len(),
                (params.len(), grads.len()),
            ));
        }
        if let Some(index) = first_non_finite(grads) {
            return Err(Error::NonFinite {
                context: "adam gradient".into(),
                index,
            });
        }
        self.step_count += 1;
        let c = &self.config;
        let t = self.step_count as i32;
        let b1 = F::lit(c.beta1);
        let b2 = F::lit(c.beta2);
        let one = F::one();
        let correction1 = F::lit(1.0 - c.beta1.powi(t));
        let correction2 = F::lit(1.0 - c.beta2.powi(t));
        let lr = F::lit(c.learning_rate);
        let eps = F::lit(c.eps);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Adam over every trainable tensor of a model, slots in visit order.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: AdamConfig,
    states: Vec<AdamState<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.first().map_or(0, |s| s.step_count)
    }

    /// Applies one update to all trainable parameters. Every gradient is
    /// validated before any parameter changes, so a rejected step leaves the
    /// model untouched.
    pub fn step<M: Parameters<F> + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        let mut bad = None;
        let mut lens = Vec::new();
        model.visit("", &mut |slot| {
            if let Some(g) = slot.grad {
                if bad.is_none() {
                    if let Some(i) = first_non_finite(g) {
                        bad = Some((slot.name.clone(), i));
                    }
                }
                lens.push(g.len());
            }
        });
        if let Some((name, index)) = bad {
            return Err(Error::NonFinite {
                context: format!("gradient of {name}"),
                index,
            });
        }
        if self.states.is_empty() {
            self.states = lens
                .iter()
                .map(|&n| AdamState::new(n, self.config))
                .collect();
        } else if self.states.len() != lens.len() {
            return Err(crate::error::shape_err("adam slots", self.states.len(), lens.len()));
        }
        let mut idx = 0;
        let mut result = Ok(());
        let states = &mut self.states;
        model.visit("", &mut |slot| {
            if let Some(g) = slot.grad {
                if result.is_ok() {
                    result = states[idx].apply(slot.value, g);
                }
                idx += 1;
            }
        });
        result
    }
}
