//! Conditional model fitting: outer LAML maximization around the inner mode.

use nalgebra::DMatrix;

use super::covariance::CovarianceParam;
use super::design::{ModelDesign, ModelStructure};
use super::inner::{natural_factor, InnerSolution};
use super::laml::laml;
use super::objective::{Hyper, Objective, PsiLayout};
use super::outer::{fd_hessian, minimize, OuterOptions};
use crate::data::{validate, ClusteredDataset, ModelSpec};
use crate::error::{MamError, Result};
use crate::sparse::{SparseCholesky, SymCsc};

pub const LOG_TAU_BOUNDS: (f64, f64) = (-10.0, 20.0);
/// Floor of the Cholesky diagonal of Λ (on the log scale: log 1e-6).
pub const THETA_DIAG_FLOOR: f64 = -13.815_510_557_964_274;
pub const THETA_DIAG_CEIL: f64 = 6.907_755_278_982_137;
pub const THETA_OFFDIAG_BOUND: f64 = 100.0;
pub const LOG_SCALE_BOUNDS: (f64, f64) = (-20.0, 20.0);
/// Distance to a bound below which a parameter counts as on the boundary.
pub const BOUNDARY_TOL: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub outer: OuterOptions,
    /// Step of the finite-difference outer Hessian.
    pub hessian_step: f64,
    /// Step of the finite-difference cross derivative of the inner gradient.
    pub cross_step: f64,
    /// Compute the outer Hessian and coefficient sensitivities (needed for
    /// the hyperparameter-uncertainty correction).
    pub outer_hessian: bool,
    pub initial_psi: Option<Vec<f64>>,
    /// Hold ψ fixed at `initial_psi` and skip the outer optimization.
    pub fixed_psi: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            outer: OuterOptions::default(),
            hessian_step: 1e-3,
            cross_step: 1e-4,
            outer_hessian: true,
            initial_psi: None,
            fixed_psi: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Diagnostics {
    pub inner_iterations: usize,
    pub inner_gradient_norm: f64,
    pub outer_evaluations: usize,
    pub outer_iterations: usize,
    pub outer_projected_gradient: f64,
    pub outer_trace: Vec<f64>,
    /// Names of outer parameters sitting on a bound.
    pub boundary: Vec<String>,
    pub correction_available: bool,
    pub correction_note: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ConditionalFit {
    pub structure: ModelStructure,
    pub design: ModelDesign,
    pub layout: PsiLayout,
    pub psi: Vec<f64>,
    pub hyper: Hyper,
    /// Joint mode (α, u).
    pub beta: Vec<f64>,
    pub laml: f64,
    pub h_joint: SymCsc,
    pub chol: SparseCholesky,
    /// Outer parameters (indices into ψ) treated as free.
    pub free: Vec<usize>,
    /// −∂² log LAML over the free parameters, when available and PD.
    pub h_outer: Option<DMatrix<f64>>,
    /// dα̂/dψ (d x |ψ|); columns of non-free parameters are zero.
    pub dalpha_dpsi: DMatrix<f64>,
    pub edf: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl ConditionalFit {
    pub fn alpha(&self) -> &[f64] {
        &self.beta[..self.design.d]
    }

    /// Random-effect predictions, N x m row-major.
    pub fn u(&self) -> &[f64] {
        &self.beta[self.design.d..]
    }

    pub fn u_cluster(&self, i: usize) -> &[f64] {
        let m = self.design.m;
        &self.u()[i * m..(i + 1) * m]
    }

    pub fn cov(&self) -> &CovarianceParam {
        &self.hyper.cov
    }

    pub fn tau(&self) -> Vec<f64> {
        self.hyper.log_tau.iter().map(|v| v.exp()).collect()
    }

    pub fn joint_nnz(&self) -> usize {
        self.h_joint.nnz()
    }
}

pub fn psi_bounds(layout: &PsiLayout, m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![LOG_TAU_BOUNDS.0; layout.n_tau];
    let mut hi = vec![LOG_TAU_BOUNDS.1; layout.n_tau];
    for i in 0..m {
        for j in 0..=i {
            if i == j {
                lo.push(THETA_DIAG_FLOOR);
                hi.push(THETA_DIAG_CEIL);
            } else {
                lo.push(-THETA_OFFDIAG_BOUND);
                hi.push(THETA_OFFDIAG_BOUND);
            }
        }
    }
    if layout.has_scale {
        lo.push(LOG_SCALE_BOUNDS.0);
        hi.push(LOG_SCALE_BOUNDS.1);
    }
    (lo, hi)
}

fn default_psi(layout: &PsiLayout, design: &ModelDesign) -> Vec<f64> {
    let mut psi = vec![2.0; layout.n_tau];
    psi.extend(std::iter::repeat_n(0.0, layout.n_theta));
    if layout.has_scale {
        let n = design.y.len() as f64;
        let mean = design.canonical_rows().map(|r| design.y[r]).sum::<f64>() / n;
        let var = design
            .canonical_rows()
            .map(|r| (design.y[r] - mean).powi(2))
            .sum::<f64>()
            / n.max(2.0);
        psi.push(0.5 * var.max(1e-12).ln());
    }
    psi
}

/// Fits the conditional additive mixed model.
pub fn fit_conditional(dataset: &ClusteredDataset, spec: &ModelSpec) -> Result<ConditionalFit> {
    fit_conditional_with(dataset, spec, &FitOptions::default())
}

pub fn fit_conditional_with(
    dataset: &ClusteredDataset,
    spec: &ModelSpec,
    opts: &FitOptions,
) -> Result<ConditionalFit> {
    validate(dataset, spec).into_result()?;
    let structure = ModelStructure::build(spec, dataset)?;
    let design = ModelDesign::new(&structure, dataset);
    fit_design(structure, design, opts)
}

/// Fits on an already assembled design.
pub fn fit_design(
    structure: ModelStructure,
    design: ModelDesign,
    opts: &FitOptions,
) -> Result<ConditionalFit> {
    let m = structure.m();
    let layout = PsiLayout::new(&structure);
    let obj = Objective::new(&structure, &design);
    let (lo, hi) = psi_bounds(&layout, m);
    let psi0 = opts
        .initial_psi
        .clone()
        .unwrap_or_else(|| default_psi(&layout, &design));
    if psi0.len() != layout.len() {
        return Err(MamError::InvalidInput(format!(
            "initial hyperparameters have length {}, expected {}",
            psi0.len(),
            layout.len()
        )));
    }

    let mut warm: Option<Vec<f64>> = None;
    let mut negative_laml = |psi: &[f64]| -> Result<f64> {
        let h = layout.hyper(m, psi);
        let (v, sol) = laml(&obj, &h, warm.as_deref())?;
        warm = Some(sol.gamma);
        Ok(-v)
    };

    let mut diagnostics = Diagnostics::default();
    let psi_hat = if opts.fixed_psi || layout.is_empty() {
        psi0.clone()
    } else {
        let res = minimize(&mut negative_laml, &psi0, &lo, &hi, opts.outer)?;
        diagnostics.outer_evaluations = res.evaluations;
        diagnostics.outer_iterations = res.iterations;
        diagnostics.outer_projected_gradient = res.projected_grad;
        diagnostics.outer_trace = res.trace;
        res.x
    };

    let hyper = layout.hyper(m, &psi_hat);
    let (laml_hat, sol) = laml(&obj, &hyper, warm.as_deref())?;
    let InnerSolution {
        beta,
        gamma,
        grad_norm,
        iterations,
        ..
    } = sol;
    let (hess, chol) = natural_factor(&obj, &hyper, &beta)?;
    diagnostics.inner_iterations = iterations;
    diagnostics.inner_gradient_norm = grad_norm;

    let names = layout.names(&structure);
    let boundary: Vec<usize> = (0..layout.len())
        .filter(|&k| psi_hat[k] - lo[k] < BOUNDARY_TOL || hi[k] - psi_hat[k] < BOUNDARY_TOL)
        .collect();
    diagnostics.boundary = boundary.iter().map(|&k| names[k].clone()).collect();
    let free: Vec<usize> = (0..layout.len()).filter(|k| !boundary.contains(k)).collect();

    let d = design.d;
    let mut dalpha = DMatrix::zeros(d, layout.len());
    let mut h_outer = None;
    if opts.outer_hessian && !free.is_empty() {
        let hm = fd_hessian(
            |psi: &[f64]| {
                let h = layout.hyper(m, psi);
                let (v, _) = laml(&obj, &h, Some(&gamma))?;
                Ok(v)
            },
            &psi_hat,
            laml_hat,
            &free,
            opts.hessian_step,
        );
        match hm {
            Ok(hm) => {
                let neg = -hm;
                let sym = 0.5 * (&neg + neg.transpose());
                if sym.clone().cholesky().is_some() {
                    h_outer = Some(sym);
                    diagnostics.correction_available = true;
                } else {
                    diagnostics.correction_note =
                        Some("correction unavailable: outer Hessian not positive definite".into());
                }
            }
            Err(e) => {
                diagnostics.correction_note =
                    Some(format!("correction unavailable: outer Hessian failed ({e})"));
            }
        }
        // implicit sensitivity of the mode: d(α,u)/dψ = −H⁻¹ ∂g/∂ψ
        for &k in &free {
            let step = opts.cross_step;
            let mut pp = psi_hat.clone();
            pp[k] += step;
            let mut pm = psi_hat.clone();
            pm[k] -= step;
            let (_, gp) = obj.value_grad(&beta, &layout.hyper(m, &pp))?;
            let (_, gm) = obj.value_grad(&beta, &layout.hyper(m, &pm))?;
            let cross: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * step)).collect();
            if cross.iter().any(|v| !v.is_finite()) {
                return Err(MamError::NonFinite { row: 0 });
            }
            let sens = chol.solve(&cross);
            for j in 0..d {
                dalpha[(j, k)] = -sens[j];
            }
        }
    } else if opts.outer_hessian {
        diagnostics.correction_note = Some("correction unavailable: boundary optimum".into());
    }
    if !diagnostics.boundary.is_empty() && diagnostics.correction_note.is_none() {
        diagnostics.correction_note = Some(format!(
            "boundary parameters excluded from the correction: {}",
            diagnostics.boundary.join(", ")
        ));
    }

    let edf = effective_df(&structure, &chol, &hyper, d);
    Ok(ConditionalFit {
        structure,
        design,
        layout,
        psi: psi_hat,
        hyper,
        beta,
        laml: laml_hat,
        h_joint: hess,
        chol,
        free,
        h_outer,
        dalpha_dpsi: dalpha,
        edf,
        diagnostics,
    })
}

/// Effective degrees of freedom per smooth: null-space dimension plus
/// Σ_j (1 − τ (H⁻¹)_jj) over its penalized columns.
fn effective_df(structure: &ModelStructure, chol: &SparseCholesky, h: &Hyper, d: usize) -> Vec<f64> {
    let n = chol.n;
    (0..structure.n_smooths())
        .map(|l| {
            let tau = h.log_tau[l].exp();
            let c = structure.penalized_columns(l);
            let mut edf = structure.smooths[l].null_dim() as f64;
            for j in c.start..c.start + c.len {
                debug_assert!(j < d);
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                let w = chol.whiten(&e);
                let hjj: f64 = w.iter().map(|v| v * v).sum();
                edf += 1.0 - tau * hjj;
            }
            edf
        })
        .collect()
}

/// Conditional mean g⁻¹(B(x)α̂ + zᵀu) at each covariate row.
pub fn predict_conditional(fit: &ConditionalFit, x_new: &[Vec<f64>], u_value: &[f64]) -> Vec<f64> {
    let link = fit.structure.link;
    x_new
        .iter()
        .map(|x| {
            let row = fit.structure.design_row(x);
            let z = fit.structure.re_structure.design_row(x);
            let eta: f64 = row.iter().zip(fit.alpha()).map(|(a, b)| a * b).sum::<f64>()
                + z.iter().zip(u_value).map(|(a, b)| a * b).sum::<f64>();
            link.inverse(eta)
        })
        .collect()
}
