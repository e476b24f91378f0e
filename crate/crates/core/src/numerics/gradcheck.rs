use crate::error::{Error, Result};

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_coordinate_errors: Vec<f64>,
    pub step_size: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Relative error with an absolute floor of one, so coordinates whose true
/// derivative is near zero are judged on absolute error instead.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central-difference check of `grad` against `f` at `point`.
pub fn finite_diff_check<F, G>(f: F, grad: G, point: &[f64], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::domain(format!("step must be positive, got {step}")));
    }
    let analytic = grad(point);
    if analytic.len() != point.len() {
        return Err(Error::contract(format!(
            "gradient has {} coordinates, point has {}",
            analytic.len(),
            point.len()
        )));
    }
    let mut probe = point.to_vec();
    let mut errors = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let x = point[i];
        probe[i] = x + step;
        let plus = f(&probe);
        probe[i] = x - step;
        let minus = f(&probe);
        probe[i] = x;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("finite difference at coordinate {i}"),
                value: if plus.is_finite() { minus } else { plus },
            });
        }
        let numeric = (plus - minus) / (2.0 * step);
        errors.push(relative_error(analytic[i], numeric));
    }
    let max_rel_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_coordinate_errors: errors,
        step_size: step,
    })
}
