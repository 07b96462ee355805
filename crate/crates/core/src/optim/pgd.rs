//! Projected gradient ascent with Armijo backtracking. Slower than MMA but
//! simple enough to serve as a reference.

use crate::error::{PlnError, Result};
use crate::model::FitStatus;

use super::mma::is_recoverable;
use super::{Outcome, StopRule};

const ARMIJO: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACK: usize = 60;

pub(crate) fn maximize<F>(
    mut eval: F,
    mut x: Vec<f64>,
    lower: &[f64],
    upper: &[f64],
    rule: &StopRule,
) -> Result<Outcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let n = x.len();
    let mut grad = vec![0.0; n];
    let mut value = eval(&x, &mut grad)?;
    let mut evaluations = 1;
    let mut trace = vec![value];
    let mut step = rule.initial_step;
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];
    let mut quiet = 0usize;
    let mut status = FitStatus::MaxIterations;
    let mut iterations = 0;

    while iterations < rule.max_iterations {
        if super::projected_gradient_inf_norm(&x, &grad, lower, upper) <= rule.gradient_tol {
            status = FitStatus::GradientTolerance;
            break;
        }
        let mut t = step;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let mut gain = 0.0;
            for j in 0..n {
                trial[j] = (x[j] + t * grad[j]).clamp(lower[j], upper[j]);
                gain += grad[j] * (trial[j] - x[j]);
            }
            evaluations += 1;
            match eval(&trial, &mut trial_grad) {
                Ok(v) if v.is_finite() && v >= value + ARMIJO * gain => {
                    accepted = Some(v);
                    break;
                }
                Ok(_) => {}
                Err(err) if is_recoverable(&err) => {}
                Err(err) => return Err(err),
            }
            t *= BACKTRACK;
        }
        let Some(new_value) = accepted else {
            status = FitStatus::Stalled;
            break;
        };
        iterations += 1;
        // Let the step grow back after easy iterations.
        step = (2.0 * t).min(1e6);

        let max_rel_step = x
            .iter()
            .zip(&trial)
            .map(|(&a, &b)| (b - a).abs() / a.abs().max(1.0))
            .fold(0.0, f64::max);
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        let old_value = value;
        value = new_value;
        trace.push(value);

        if (value - old_value).abs() <= rule.objective_tol * value.abs() {
            quiet += 1;
            if quiet >= rule.patience {
                status = FitStatus::ObjectiveTolerance;
                break;
            }
        } else {
            quiet = 0;
        }
        if max_rel_step <= rule.parameter_tol {
            status = FitStatus::ParameterTolerance;
            break;
        }
    }
    if !value.is_finite() {
        return Err(PlnError::Optimization("non-finite objective".into()));
    }
    Ok(Outcome {
        x,
        value,
        gradient: grad,
        iterations,
        evaluations,
        status,
        trace,
    })
}
