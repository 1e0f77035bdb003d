//! Penalized joint negative log-likelihood in (α, u) with analytic gradient
//! and sparse Hessian.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use super::covariance::{n_params, CovarianceParam};
use super::design::{ModelDesign, ModelStructure, TermColumns};
use crate::error::{MamError, Result};
use crate::family::{Family, Link};
use crate::sparse::SymCsc;

/// Hyperparameters held fixed by the inner problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyper {
    pub log_tau: Vec<f64>,
    pub cov: CovarianceParam,
    /// Residual standard deviation (Gaussian only; 1 otherwise).
    pub scale: f64,
}

/// Layout of the outer parameter vector ψ = (log τ, θ, [log σ_ε]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PsiLayout {
    pub n_tau: usize,
    pub n_theta: usize,
    pub has_scale: bool,
}

impl PsiLayout {
    pub fn new(structure: &ModelStructure) -> Self {
        PsiLayout {
            n_tau: structure.n_smooths(),
            n_theta: n_params(structure.m()),
            has_scale: structure.family.has_scale(),
        }
    }

    pub fn len(&self) -> usize {
        self.n_tau + self.n_theta + usize::from(self.has_scale)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn theta_offset(&self) -> usize {
        self.n_tau
    }

    pub fn scale_index(&self) -> Option<usize> {
        self.has_scale.then_some(self.n_tau + self.n_theta)
    }

    pub fn hyper(&self, m: usize, psi: &[f64]) -> Hyper {
        Hyper {
            log_tau: psi[..self.n_tau].to_vec(),
            cov: CovarianceParam::new(m, psi[self.n_tau..self.n_tau + self.n_theta].to_vec()),
            scale: self.scale_index().map_or(1.0, |k| psi[k].exp()),
        }
    }

    pub fn psi(&self, h: &Hyper) -> Vec<f64> {
        let mut v = h.log_tau.clone();
        v.extend_from_slice(&h.cov.theta);
        if self.has_scale {
            v.push(h.scale.ln());
        }
        v
    }

    pub fn names(&self, structure: &ModelStructure) -> Vec<String> {
        let mut out: Vec<String> = structure
            .smooths
            .iter()
            .map(|s| {
                format!(
                    "log_tau[{}]",
                    structure
                        .covariate_names
                        .get(s.covariate)
                        .cloned()
                        .unwrap_or_else(|| format!("x{}", s.covariate))
                )
            })
            .collect();
        let m = structure.m();
        for i in 0..m {
            for j in 0..=i {
                out.push(if i == j {
                    format!("theta[log L{i}{j}]")
                } else {
                    format!("theta[L{i}{j}]")
                });
            }
        }
        if self.has_scale {
            out.push("log_sigma_eps".into());
        }
        out
    }
}

pub struct Evaluation {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Option<SymCsc>,
}

/// The penalized joint objective over one design.
pub struct Objective<'a> {
    pub design: &'a ModelDesign,
    pub family: Family,
    pub link: Link,
    pub penalized: Vec<TermColumns>,
}

impl<'a> Objective<'a> {
    pub fn new(structure: &ModelStructure, design: &'a ModelDesign) -> Self {
        Objective {
            design,
            family: structure.family,
            link: structure.link,
            penalized: (0..structure.n_smooths())
                .map(|l| structure.penalized_columns(l))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.design.joint_dim()
    }

    /// Sum of r_l log τ_l / 2 style normalizer counts, one per smooth.
    pub fn penalty_ranks(&self) -> Vec<usize> {
        self.penalized.iter().map(|c| c.len).collect()
    }

    pub fn value(&self, beta: &[f64], h: &Hyper) -> Result<f64> {
        Ok(self.evaluate(beta, h, false, false)?.value)
    }

    pub fn value_grad(&self, beta: &[f64], h: &Hyper) -> Result<(f64, Vec<f64>)> {
        let e = self.evaluate(beta, h, true, false)?;
        Ok((e.value, e.grad))
    }

    /// Objective, gradient and (optionally) the lower triangle of the Hessian
    /// in the natural (α, u) ordering.
    pub fn evaluate(&self, beta: &[f64], h: &Hyper, grad: bool, hess: bool) -> Result<Evaluation> {
        self.evaluate_in(beta, h, grad, hess, false)
    }

    /// The same objective in whitened coordinates (α, v) with u_i = Λ v_i,
    /// minus the constant N log|Λ| of the change of variables. The prior
    /// block of its Hessian is exactly I however close Σ is to singular.
    pub fn evaluate_whitened(&self, gamma: &[f64], h: &Hyper, grad: bool, hess: bool) -> Result<Evaluation> {
        self.evaluate_in(gamma, h, grad, hess, true)
    }

    pub fn value_whitened(&self, gamma: &[f64], h: &Hyper) -> Result<f64> {
        Ok(self.evaluate_in(gamma, h, false, false, true)?.value)
    }

    /// Maps whitened coordinates (α, v) to (α, u).
    pub fn unwhiten(&self, gamma: &[f64], h: &Hyper) -> Vec<f64> {
        let (d, m) = (self.design.d, self.design.m);
        let lam = h.cov.lambda();
        let mut beta = gamma.to_vec();
        for i in 0..self.design.n_clusters() {
            let v = &gamma[d + i * m..d + (i + 1) * m];
            for k in 0..m {
                beta[d + i * m + k] = (0..=k).map(|j| lam[(k, j)] * v[j]).sum();
            }
        }
        beta
    }

    fn evaluate_in(&self, beta: &[f64], h: &Hyper, grad: bool, hess: bool, whitened: bool) -> Result<Evaluation> {
        let des = self.design;
        let (d, m) = (des.d, des.m);
        let nc = des.n_clusters();
        debug_assert_eq!(beta.len(), d + nc * m);
        let alpha = &beta[..d];
        let sig_inv = h.cov.sigma_inv();
        let lam = h.cov.lambda();
        let log_det = h.cov.log_det_sigma();

        let mut value = 0.0;
        let mut g = if grad || hess { vec![0.0; beta.len()] } else { Vec::new() };
        let mut h_aa = if hess { vec![0.0; d * d] } else { Vec::new() };
        let mut trip: Vec<(usize, usize, f64)> = Vec::new();
        if hess {
            trip.reserve(d * (d + 1) / 2 + nc * (m * d + m * (m + 1) / 2));
        }
        let mut h_ua = vec![0.0; m * d];
        let mut h_uu = vec![0.0; m * m];
        let mut zw = vec![0.0; m];

        for &i in &des.order {
            let ui = &beta[d + i * m..d + (i + 1) * m];
            if hess {
                h_ua.iter_mut().for_each(|v| *v = 0.0);
                h_uu.iter_mut().for_each(|v| *v = 0.0);
            }
            for r in des.cluster_ptr[i]..des.cluster_ptr[i + 1] {
                let x = des.row(r);
                let z = if whitened {
                    // η picks up zᵀΛv
                    let zr = des.z_row(r);
                    for k in 0..m {
                        zw[k] = (k..m).map(|j| lam[(j, k)] * zr[j]).sum();
                    }
                    &zw[..]
                } else {
                    des.z_row(r)
                };
                let mut eta = 0.0;
                for j in 0..d {
                    eta += x[j] * alpha[j];
                }
                for k in 0..m {
                    eta += z[k] * ui[k];
                }
                if !eta.is_finite() {
                    return Err(MamError::NonFinite { row: r });
                }
                let (nll, d1, d2) = self.family.nll_derivs(self.link, des.y[r], eta, h.scale);
                value += nll;
                if grad || hess {
                    for j in 0..d {
                        g[j] += d1 * x[j];
                    }
                    for k in 0..m {
                        g[d + i * m + k] += d1 * z[k];
                    }
                }
                if hess {
                    for a in 0..d {
                        let wa = d2 * x[a];
                        if wa == 0.0 {
                            continue;
                        }
                        let row = &mut h_aa[a * d..a * d + a + 1];
                        for (b, v) in row.iter_mut().enumerate() {
                            *v += wa * x[b];
                        }
                    }
                    for k in 0..m {
                        let wk = d2 * z[k];
                        for a in 0..d {
                            h_ua[k * d + a] += wk * x[a];
                        }
                        for l in 0..=k {
                            h_uu[k * m + l] += wk * z[l];
                        }
                    }
                }
            }
            if whitened {
                let quad: f64 = ui.iter().map(|v| v * v).sum();
                if grad || hess {
                    for k in 0..m {
                        g[d + i * m + k] += ui[k];
                    }
                }
                value += 0.5 * quad + 0.5 * m as f64 * (2.0 * PI).ln();
            } else {
                // through w = Λ⁻¹u; forming Σ⁻¹u directly cancels badly when
                // Σ is close to singular
                let w = solve_lower(&lam, ui);
                let quad: f64 = w.iter().map(|v| v * v).sum();
                if grad || hess {
                    let s = solve_lower_transpose(&lam, &w);
                    for k in 0..m {
                        g[d + i * m + k] += s[k];
                    }
                }
                value += 0.5 * quad + 0.5 * log_det + 0.5 * m as f64 * (2.0 * PI).ln();
            }
            if hess {
                let base = d + i * m;
                for k in 0..m {
                    for a in 0..d {
                        trip.push((base + k, a, h_ua[k * d + a]));
                    }
                    for l in 0..=k {
                        let prior = if whitened { f64::from(u8::from(k == l)) } else { sig_inv[(k, l)] };
                        trip.push((base + k, base + l, h_uu[k * m + l] + prior));
                    }
                }
            }
        }

        // smoothing penalties on the range-space coordinates
        for (l, c) in self.penalized.iter().enumerate() {
            let tau = h.log_tau[l].exp();
            for j in c.start..c.start + c.len {
                value += 0.5 * tau * alpha[j] * alpha[j];
                if grad || hess {
                    g[j] += tau * alpha[j];
                }
                if hess {
                    h_aa[j * d + j] += tau;
                }
            }
        }

        let hess = if hess {
            for a in 0..d {
                for b in 0..=a {
                    trip.push((a, b, h_aa[a * d + b]));
                }
            }
            Some(SymCsc::from_triplets(beta.len(), &trip))
        } else {
            None
        };
        if !value.is_finite() {
            return Err(MamError::NonFinite { row: 0 });
        }
        Ok(Evaluation {
            value,
            grad: g,
            hess,
        })
    }

    /// Dense Hessian (testing and small problems).
    pub fn dense_hessian(&self, beta: &[f64], h: &Hyper) -> Result<DMatrix<f64>> {
        Ok(self
            .evaluate(beta, h, false, true)?
            .hess
            .expect("requested")
            .to_dense())
    }
}

fn solve_lower(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let m = b.len();
    let mut x = vec![0.0; m];
    for k in 0..m {
        let mut s = b[k];
        for j in 0..k {
            s -= l[(k, j)] * x[j];
        }
        x[k] = s / l[(k, k)];
    }
    x
}

fn solve_lower_transpose(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let m = b.len();
    let mut x = vec![0.0; m];
    for k in (0..m).rev() {
        let mut s = b[k];
        for j in k + 1..m {
            s -= l[(j, k)] * x[j];
        }
        x[k] = s / l[(k, k)];
    }
    x
}
