//! Box-constrained maximization with conservative convex separable
//! approximations and moving asymptotes (CCSA/MMA).
//!
//! Each outer iteration builds, for `f = −J`, the separable model
//!
//! ```text
//! f̃(x + δ) = f(x) + Σ_j [σ_j² g_j δ_j + (σ_j |g_j| + ρ/2) δ_j²] / (σ_j² − δ_j²)
//! ```
//!
//! minimizes it coordinate-wise in closed form inside `|δ_j| ≤ 0.9 σ_j` and
//! the box, and accepts the step only if the model was conservative at the
//! trial point (`f(x + δ) ≤ f̃(x + δ)`). Otherwise `ρ` grows and the step is
//! recomputed. Accepted iterates therefore never decrease `J`.

use crate::error::{PlnError, Result};
use crate::model::FitStatus;

use super::{Outcome, StopRule};

const RHO_MIN: f64 = 1e-5;
const MAX_INNER: usize = 60;
const SIGMA_MIN: f64 = 1e-12;
const SIGMA_MAX: f64 = 1e3;
const SHRINK: f64 = 0.7;
const GROW: f64 = 1.2;

pub(crate) fn is_recoverable(err: &PlnError) -> bool {
    matches!(
        err,
        PlnError::Overflow(_) | PlnError::Domain { .. } | PlnError::NonPositiveScale(_)
    )
}

#[cfg(test)]
pub(crate) fn maximize<F>(
    eval: F,
    x: Vec<f64>,
    lower: &[f64],
    upper: &[f64],
    rule: &StopRule,
) -> Result<Outcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    maximize_with(eval, |_: &mut [f64]| false, x, lower, upper, rule)
}

/// As [`maximize`], with `shift` applied after every accepted step. `shift`
/// must never decrease the objective; it returns whether it moved `x`.
pub(crate) fn maximize_with<F, P>(
    mut eval: F,
    mut shift: P,
    mut x: Vec<f64>,
    lower: &[f64],
    upper: &[f64],
    rule: &StopRule,
) -> Result<Outcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
    P: FnMut(&mut [f64]) -> bool,
{
    let n = x.len();
    let mut grad = vec![0.0; n];
    let mut value = eval(&x, &mut grad)?;
    let mut evaluations = 1;
    let mut trace = vec![value];

    let mut sigma: Vec<f64> = (0..n)
        .map(|j| initial_sigma(x[j], lower[j], upper[j], rule.initial_step))
        .collect();
    let mut rho = 1.0;
    let mut last_step: Option<Vec<f64>> = None;

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
        let mut accepted = None;
        let mut failures = 0;
        for _ in 0..MAX_INNER {
            let mut approx = 0.0;
            let mut width = 0.0;
            for j in 0..n {
                let g = -grad[j];
                let s = sigma[j];
                let u = s * s * g;
                let v = g.abs() * s + 0.5 * rho;
                let mut dx = if v > 0.0 {
                    let r = u / (v * s);
                    (u / v) / (-1.0 - (1.0 - r * r).abs().sqrt())
                } else {
                    0.0
                };
                dx = dx.clamp(-0.9 * s, 0.9 * s);
                dx = dx.clamp(lower[j] - x[j], upper[j] - x[j]);
                trial[j] = x[j] + dx;
                let dx = trial[j] - x[j];
                let denom = s * s - dx * dx;
                approx += (u * dx + v * dx * dx) / denom;
                width += 0.5 * dx * dx / denom;
            }
            let model_f = -value + approx;
            evaluations += 1;
            match eval(&trial, &mut trial_grad) {
                Ok(new_value) if new_value.is_finite() => {
                    let new_f = -new_value;
                    if new_f <= model_f {
                        accepted = Some(new_value);
                        break;
                    }
                    let step = if width > 0.0 {
                        1.1 * (rho + (new_f - model_f) / width)
                    } else {
                        10.0 * rho
                    };
                    rho = (10.0 * rho).min(step);
                }
                Ok(_) => rho *= 10.0,
                Err(err) if is_recoverable(&err) => {
                    failures += 1;
                    rho *= 10.0;
                    if failures >= MAX_INNER / 2 {
                        return Err(PlnError::Optimization(format!(
                            "repeated evaluation failure at iteration {iterations}: {err}"
                        )));
                    }
                }
                Err(err) => return Err(err),
            }
        }
        let Some(new_value) = accepted else {
            status = FitStatus::Stalled;
            break;
        };
        iterations += 1;

        let max_rel_step = x
            .iter()
            .zip(&trial)
            .map(|(&a, &b)| (b - a).abs() / a.abs().max(1.0))
            .fold(0.0, f64::max);

        let step: Vec<f64> = trial.iter().zip(&x).map(|(t, a)| t - a).collect();
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        let old_value = value;
        value = new_value;
        if shift(&mut x) {
            evaluations += 1;
            let shifted = eval(&x, &mut grad)?;
            debug_assert!(shifted >= value - 1e-9 * value.abs());
            value = shifted;
        }
        trace.push(value);

        // Successive steps that reverse direction mean the model is too
        // loose there; steps that persist mean it is too tight.
        if let Some(last) = &last_step {
            for j in 0..n {
                let turn = step[j] * last[j];
                if turn < 0.0 {
                    sigma[j] *= SHRINK;
                } else if turn > 0.0 {
                    sigma[j] *= GROW;
                }
                sigma[j] = sigma[j].clamp(SIGMA_MIN, SIGMA_MAX);
            }
        }
        last_step = Some(step);
        rho = (0.1 * rho).max(RHO_MIN);

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

fn initial_sigma(x: f64, lower: f64, upper: f64, step: f64) -> f64 {
    let base = step * x.abs().max(1.0);
    if lower.is_finite() && upper.is_finite() {
        base.min(0.5 * (upper - lower))
    } else {
        base
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule() -> StopRule {
        StopRule {
            max_iterations: 5000,
            objective_tol: 1e-14,
            patience: 5,
            parameter_tol: 1e-12,
            gradient_tol: 1e-10,
            initial_step: 0.5,
        }
    }

    #[test]
    fn maximizes_concave_quadratic() {
        // J = −Σ c_j (x_j − t_j)², optimum at t.
        let c = [1.0, 10.0, 0.1];
        let t = [1.0, -2.0, 3.0];
        let out = maximize(
            |x, g| {
                let mut v = 0.0;
                for j in 0..3 {
                    v -= c[j] * (x[j] - t[j]).powi(2);
                    g[j] = -2.0 * c[j] * (x[j] - t[j]);
                }
                Ok(v)
            },
            vec![0.0; 3],
            &[f64::NEG_INFINITY; 3],
            &[f64::INFINITY; 3],
            &rule(),
        )
        .unwrap();
        for j in 0..3 {
            assert!((out.x[j] - t[j]).abs() < 1e-5, "{:?}", out.x);
        }
        assert!(out.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn respects_lower_bounds() {
        // Unconstrained optimum at −1, box floor at 0.5.
        let out = maximize(
            |x, g| {
                g[0] = -2.0 * (x[0] + 1.0);
                Ok(-(x[0] + 1.0).powi(2))
            },
            vec![2.0],
            &[0.5],
            &[f64::INFINITY],
            &rule(),
        )
        .unwrap();
        assert!((out.x[0] - 0.5).abs() < 1e-9);
        assert_eq!(out.status, FitStatus::GradientTolerance);
    }

    #[test]
    fn backs_off_from_overflow() {
        // J = x − e^x, optimum at 0; start far left so early steps are large.
        let out = maximize(
            |x, g| {
                let e = x[0].exp();
                if !e.is_finite() || x[0] > 50.0 {
                    return Err(PlnError::Overflow("test"));
                }
                g[0] = 1.0 - e;
                Ok(x[0] - e)
            },
            vec![-30.0],
            &[f64::NEG_INFINITY],
            &[f64::INFINITY],
            &rule(),
        )
        .unwrap();
        assert!(out.x[0].abs() < 1e-5, "{}", out.x[0]);
    }
}
