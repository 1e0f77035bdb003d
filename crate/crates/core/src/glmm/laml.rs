//! Laplace-approximate restricted likelihood over (log τ, θ).

use std::f64::consts::PI;

use super::inner::{inner_newton, InnerSolution};
use super::objective::{Hyper, Objective};
use crate::error::Result;

/// Log LAML with all of (α, u) integrated out, the unpenalized coefficients
/// under a flat prior:
///
/// −f(mode) + Σ_l (r_l/2) log(τ_l / 2π) + (D/2) log 2π − ½ log|H|
///
/// where f is the penalized joint objective (which already carries the
/// random-effect normalizers) and D = d + N m. Evaluated in whitened
/// coordinates, where f and ½ log|H| both drop N log|Λ|.
pub fn laml_at(obj: &Objective, h: &Hyper, sol: &InnerSolution) -> f64 {
    let two_pi = 2.0 * PI;
    let mut v = -sol.value + 0.5 * obj.dim() as f64 * two_pi.ln() - 0.5 * sol.log_det;
    for (r, lt) in obj.penalty_ranks().iter().zip(&h.log_tau) {
        v += 0.5 * *r as f64 * (lt - two_pi.ln());
    }
    v
}

/// Runs the inner problem (warm-started) and returns the LAML with its mode.
pub fn laml(obj: &Objective, h: &Hyper, warm: Option<&[f64]>) -> Result<(f64, InnerSolution)> {
    let sol = inner_newton(obj, h, warm)?;
    Ok((laml_at(obj, h, &sol), sol))
}
