//! Newton iteration for the mode of the penalized joint objective.

use super::objective::{Hyper, Objective};
use crate::error::{MamError, Result};
use crate::sparse::{SparseCholesky, SymCsc};

pub const GRAD_TOL: f64 = 1e-8;
pub const MAX_ITER: usize = 200;
const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
const MIN_STEP: f64 = 1e-12;
const SHIFT_START: f64 = 1e-6;
const MAX_SHIFTS: usize = 10;

#[derive(Debug, Clone)]
pub struct InnerSolution {
    /// Joint mode (α, u).
    pub beta: Vec<f64>,
    /// The mode in whitened coordinates (α, v), u_i = Λ v_i; the warm start
    /// for the next solve.
    pub gamma: Vec<f64>,
    /// Whitened objective at the mode.
    pub value: f64,
    /// log-determinant of the whitened Hessian at the mode.
    pub log_det: f64,
    /// Max-norm of the whitened gradient.
    pub grad_norm: f64,
    pub iterations: usize,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

/// Factorizes `h`, adding λI (λ = 1e-6, 1e-5, ...) when it is not positive
/// definite. Returns the factor and the shift used.
fn factor_shifted(h: &SymCsc, perm: &[usize]) -> Result<(SparseCholesky, f64)> {
    if let Ok(f) = SparseCholesky::factor(h, Some(perm.to_vec())) {
        return Ok((f, 0.0));
    }
    let mut lambda = SHIFT_START;
    for _ in 0..MAX_SHIFTS {
        let mut shifted = h.clone();
        shifted.shift_diagonal(lambda);
        if let Ok(f) = SparseCholesky::factor(&shifted, Some(perm.to_vec())) {
            return Ok((f, lambda));
        }
        lambda *= 10.0;
    }
    Err(MamError::NotPositiveDefinite(format!(
        "joint Hessian still indefinite after {MAX_SHIFTS} Levenberg shifts"
    )))
}

/// Minimizes the penalized joint objective at fixed hyperparameters in
/// whitened coordinates, starting from `warm` (whitened; zeros if `None`).
/// Working in v keeps the Newton system well conditioned as Σ approaches
/// singularity, where the natural prior block Σ⁻¹ blows up.
pub fn inner_newton(obj: &Objective, h: &Hyper, warm: Option<&[f64]>) -> Result<InnerSolution> {
    let n = obj.dim();
    let mut gamma = match warm {
        Some(w) if w.len() == n => w.to_vec(),
        _ => vec![0.0; n],
    };
    let perm = obj.design.arrow_permutation();
    let mut e = obj.evaluate_whitened(&gamma, h, true, true)?;
    let mut polished = false;

    for it in 0..=MAX_ITER {
        let gnorm = max_abs(&e.grad);
        let converged = gnorm <= GRAD_TOL * (1.0 + e.value.abs());
        let hess = e.hess.take().expect("requested");
        if converged && polished {
            let chol = SparseCholesky::factor(&hess, Some(perm.clone())).map_err(|_| {
                MamError::NotPositiveDefinite("conditional Hessian not PD at the mode".into())
            })?;
            return Ok(InnerSolution {
                beta: obj.unwhiten(&gamma, h),
                gamma,
                value: e.value,
                log_det: chol.log_det(),
                grad_norm: gnorm,
                iterations: it,
            });
        }
        if it == MAX_ITER {
            return Err(MamError::InnerNotConverged {
                iterations: it,
                gradient_norm: gnorm,
            });
        }

        let (chol, _) = factor_shifted(&hess, &perm)?;
        let step: Vec<f64> = chol.solve(&e.grad).into_iter().map(|v| -v).collect();
        let slope: f64 = perm.iter().map(|&k| step[k] * e.grad[k]).sum();

        // When the predicted decrease is below the rounding level of f the
        // Armijo test is meaningless; accept a full step that does not raise
        // f beyond that level.
        let noise = 16.0 * f64::EPSILON * (1.0 + e.value.abs());
        let tiny_decrease = -slope <= 1e3 * noise;
        let mut s = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = gamma.iter().zip(&step).map(|(b, p)| b + s * p).collect();
            let fv = obj.value_whitened(&trial, h).unwrap_or(f64::INFINITY);
            // a shortened step that leaves f unchanged has stopped moving
            let armijo = fv <= e.value + ARMIJO * s * slope && (s == 1.0 || fv < e.value);
            let within_noise = s == 1.0 && tiny_decrease && fv <= e.value + noise;
            if fv.is_finite() && (armijo || within_noise) {
                accepted = Some(trial);
                break;
            }
            s *= 0.5;
            if s < MIN_STEP {
                break;
            }
        }
        match accepted {
            Some(trial) => {
                gamma = trial;
                // one extra full Newton step after the tolerance is first met
                polished = converged;
                e = obj.evaluate_whitened(&gamma, h, true, true)?;
            }
            None if converged => {
                // already at machine-precision stationarity
                polished = true;
                e.hess = Some(hess);
            }
            None => {
                return Err(MamError::InnerNotConverged {
                    iterations: it,
                    gradient_norm: gnorm,
                })
            }
        }
    }
    unreachable!()
}

/// Natural-coordinate Hessian at `beta` and its sparse factor.
pub fn natural_factor(obj: &Objective, h: &Hyper, beta: &[f64]) -> Result<(SymCsc, SparseCholesky)> {
    let hess = obj.evaluate(beta, h, false, true)?.hess.expect("requested");
    let chol = SparseCholesky::factor(&hess, Some(obj.design.arrow_permutation()))
        .map_err(|_| MamError::NotPositiveDefinite("conditional Hessian not PD at the mode".into()))?;
    Ok((hess, chol))
}
