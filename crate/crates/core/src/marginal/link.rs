//! Quadrature marginalization of the linked conditional mean, its Jacobians,
//! and the inverse problem used to generate data with a known marginal mean.

use nalgebra::DMatrix;

use super::ghq::GhqRule;
use crate::error::{MamError, Result};
use crate::family::Link;
use crate::glmm::{ConditionalFit, CovarianceParam};

/// Bounds applied to a quadrature mean that rounds outside the link's domain.
pub const MEAN_CLAMP: f64 = 1e-12;

/// Λᵀ z, so that zᵀ Λ node = (Λᵀ z) · node.
pub fn loading(lambda: &DMatrix<f64>, z: &[f64]) -> Vec<f64> {
    let m = z.len();
    (0..m)
        .map(|j| (0..m).map(|i| lambda[(i, j)] * z[i]).sum())
        .collect()
}

fn node_shift(a: &[f64], node: &[f64]) -> f64 {
    a.iter().zip(node).map(|(x, y)| x * y).sum()
}

/// Σ_q g⁻¹(η + aᵀ node_q) w_q.
pub fn quadrature_mean(link: Link, eta: f64, a: &[f64], rule: &GhqRule) -> f64 {
    (0..rule.len())
        .map(|q| link.inverse(eta + node_shift(a, rule.node(q))) * rule.weights[q])
        .sum()
}

/// Applies g to a quadrature mean, clamping into the open mean space.
/// Returns the linked value and whether clamping occurred.
pub fn link_clamped(link: Link, mu: f64) -> (f64, bool) {
    let (lo, hi) = link.mean_bounds();
    let mut v = mu;
    let mut flagged = false;
    if lo.is_finite() && v <= lo + MEAN_CLAMP {
        v = lo + MEAN_CLAMP;
        flagged = true;
    }
    if hi.is_finite() && v >= hi - MEAN_CLAMP {
        v = hi - MEAN_CLAMP;
        flagged = true;
    }
    (link.link(v), flagged)
}

/// Linked marginal mean g(E_u[g⁻¹(η + zᵀu)]) for u ~ N(0, ΛΛᵀ).
pub fn marginalize_eta(link: Link, eta: f64, z: &[f64], lambda: &DMatrix<f64>, rule: &GhqRule) -> (f64, bool) {
    let a = loading(lambda, z);
    link_clamped(link, quadrature_mean(link, eta, &a, rule))
}

/// Pseudo-outcome at one covariate row of a fitted model.
pub fn marginal_link(fit: &ConditionalFit, x_row: &[f64], z_row: &[f64], rule: &GhqRule) -> f64 {
    let row = fit.structure.design_row(x_row);
    let eta: f64 = row.iter().zip(fit.alpha()).map(|(a, b)| a * b).sum();
    marginalize_eta(fit.structure.link, eta, z_row, &fit.cov().lambda(), rule).0
}

/// Rows at which pseudo-outcomes are computed.
#[derive(Debug, Clone)]
pub enum Grid {
    /// The training rows of the fit, in cluster order.
    Observed,
    /// Arbitrary covariate vectors.
    Rows(Vec<Vec<f64>>),
}

/// Pseudo-outcomes on a grid with their Jacobians.
///
/// The joint Jacobian ∂λ̂/∂(α, u) has the structure `scale[i] * x_i` in its α
/// block and zeros in every u column, because the quadrature integrates over
/// the random-effect distribution rather than conditioning on û. Only the
/// row scales and fixed-effect rows are stored; `d_joint_row` expands a row.
#[derive(Debug, Clone)]
pub struct MarginalizedMeans {
    pub n: usize,
    pub d: usize,
    pub joint_dim: usize,
    /// Fixed-effect rows of the grid, n x d row-major.
    pub x: Vec<f64>,
    pub lambda_hat: Vec<f64>,
    pub scale: Vec<f64>,
    /// Total derivative dλ̂/dψ, n x |ψ|.
    pub d_outer: DMatrix<f64>,
    /// Rows whose quadrature mean had to be clamped.
    pub clamped: usize,
}

impl MarginalizedMeans {
    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    /// α block of row i of D_joint.
    pub fn d_alpha_row(&self, i: usize) -> Vec<f64> {
        self.x_row(i).iter().map(|v| v * self.scale[i]).collect()
    }

    /// Full row i of D_joint, length d + N m.
    pub fn d_joint_row(&self, i: usize) -> Vec<f64> {
        let mut r = self.d_alpha_row(i);
        r.resize(self.joint_dim, 0.0);
        r
    }

    /// Dense D_joint (small problems and tests only).
    pub fn d_joint_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.joint_dim, |i, j| {
            if j < self.d {
                self.scale[i] * self.x_row(i)[j]
            } else {
                0.0
            }
        })
    }
}

/// Pseudo-outcomes with D_joint and the total D_outer on `grid`.
pub fn jacobian_lambda(fit: &ConditionalFit, grid: &Grid, rule: &GhqRule) -> Result<MarginalizedMeans> {
    let st = &fit.structure;
    let link = st.link;
    let d = fit.design.d;
    let m = fit.design.m;
    let lambda = fit.cov().lambda();
    let layout = fit.layout;
    let npsi = layout.len();
    let dl: Vec<DMatrix<f64>> = (0..layout.n_theta).map(|k| fit.cov().dlambda(k)).collect();

    let (n, x, z): (usize, Vec<f64>, Vec<f64>) = match grid {
        Grid::Observed => (fit.design.n, fit.design.x.clone(), fit.design.z.clone()),
        Grid::Rows(rows) => {
            let mut x = Vec::with_capacity(rows.len() * d);
            let mut z = Vec::with_capacity(rows.len() * m);
            for r in rows {
                if r.len() != st.p {
                    return Err(MamError::InvalidInput(format!(
                        "grid row has {} covariates, expected {}",
                        r.len(),
                        st.p
                    )));
                }
                x.extend(st.design_row(r));
                z.extend(st.re_structure.design_row(r));
            }
            (rows.len(), x, z)
        }
    };

    let alpha = fit.alpha();
    let mut lambda_hat = Vec::with_capacity(n);
    let mut scale = Vec::with_capacity(n);
    let mut d_outer = DMatrix::zeros(n, npsi);
    let mut clamped = 0;
    let mut direct = vec![0.0; layout.n_theta];
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        let zi = &z[i * m..(i + 1) * m];
        let eta: f64 = xi.iter().zip(alpha).map(|(a, b)| a * b).sum();
        if !eta.is_finite() {
            return Err(MamError::NonFinite { row: i });
        }
        let a = loading(&lambda, zi);
        let da: Vec<Vec<f64>> = dl.iter().map(|dlk| loading(dlk, zi)).collect();
        let mut mu = 0.0;
        let mut s1 = 0.0;
        direct.iter_mut().for_each(|v| *v = 0.0);
        for q in 0..rule.len() {
            let node = rule.node(q);
            let eq = eta + node_shift(&a, node);
            let w = rule.weights[q];
            mu += link.inverse(eq) * w;
            let dq = link.inverse_deriv(eq) * w;
            s1 += dq;
            for (k, dak) in da.iter().enumerate() {
                direct[k] += dq * node_shift(dak, node);
            }
        }
        let (lam, flag) = link_clamped(link, mu);
        clamped += usize::from(flag);
        let gprime = link.link_deriv(mu.clamp(
            link.mean_bounds().0 + MEAN_CLAMP,
            link.mean_bounds().1 - MEAN_CLAMP,
        ));
        let c = gprime * s1;
        lambda_hat.push(lam);
        scale.push(c);
        for k in 0..npsi {
            let mut v = 0.0;
            if k >= layout.n_tau && k < layout.n_tau + layout.n_theta {
                v += gprime * direct[k - layout.n_tau];
            }
            for j in 0..d {
                v += c * xi[j] * fit.dalpha_dpsi[(j, k)];
            }
            d_outer[(i, k)] = v;
        }
    }
    Ok(MarginalizedMeans {
        n,
        d,
        joint_dim: fit.design.joint_dim(),
        x,
        lambda_hat,
        scale,
        d_outer,
        clamped,
    })
}

/// Finds Δ with g(E_u[g⁻¹(Δ + zᵀu)]) = target for u ~ N(0, Σ(θ)), by
/// Newton steps safeguarded with bisection.
pub fn solve_delta(
    target: f64,
    z_row: &[f64],
    cov: &CovarianceParam,
    rule: &GhqRule,
    link: Link,
) -> Result<f64> {
    let sigma = cov.sigma();
    let lambda = cov.lambda();
    let a = loading(&lambda, z_row);
    let (lo_mu, hi_mu) = link.mean_bounds();
    let mu_target = link.inverse(target);
    if !(mu_target > lo_mu && mu_target < hi_mu) || !target.is_finite() {
        return Err(MamError::InvalidInput(format!(
            "target {target} maps outside the mean space"
        )));
    }
    let width = 10.0 * (1.0 + sigma.norm());
    let resid = |delta: f64| -> (f64, f64) {
        let mut mu = 0.0;
        let mut dmu = 0.0;
        for q in 0..rule.len() {
            let eq = delta + node_shift(&a, rule.node(q));
            mu += link.inverse(eq) * rule.weights[q];
            dmu += link.inverse_deriv(eq) * rule.weights[q];
        }
        let (lam, _) = link_clamped(link, mu);
        let gp = link.link_deriv(mu.clamp(lo_mu + MEAN_CLAMP, hi_mu - MEAN_CLAMP));
        (lam - target, gp * dmu)
    };
    let (mut lo, mut hi) = (target - width, target + width);
    let (flo, _) = resid(lo);
    let (fhi, _) = resid(hi);
    if !(flo < 0.0 && fhi > 0.0) {
        return Err(MamError::Bracket(format!(
            "no sign change on [{lo}, {hi}] for target {target} (residuals {flo:e}, {fhi:e})"
        )));
    }
    let mut x = target.clamp(lo, hi);
    for _ in 0..200 {
        let (f, df) = resid(x);
        if f.abs() <= 1e-10 * 0.01 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - f / df;
        x = if df > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 1e-15 * (1.0 + x.abs()) {
            break;
        }
    }
    let (f, _) = resid(x);
    if f.abs() <= 1e-10 {
        Ok(x)
    } else {
        Err(MamError::Bracket(format!(
            "root search stalled at residual {f:e} for target {target}"
        )))
    }
}
