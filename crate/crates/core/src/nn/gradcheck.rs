//! Central finite-difference gradient checking.

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_relative_error: f64,
    /// Coordinate with the largest error when the check fails.
    pub failing_coordinate: Option<usize>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

/// Compares `analytic` against central differences of `loss` around `point`.
///
/// `loss` must be a scalar function of the flat parameter vector.
pub fn grad_check<L>(
    mut loss: L,
    point: &[f64],
    analytic: &[f64],
    tolerance: f64,
    step: f64,
) -> GradCheckReport
where
    L: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    let mut worst_at = None;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = loss(&x);
        x[i] = orig - step;
        let down = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if err > worst || worst_at.is_none() {
            worst = err.max(worst);
            worst_at = Some(i);
        }
    }
    GradCheckReport {
        max_relative_error: worst,
        failing_coordinate: if worst > tolerance { worst_at } else { None },
        tolerance,
    }
}
