//! Projection of pseudo-outcomes onto the marginal basis and pointwise
//! variances of the resulting curve.
//!
//! Every variance here has the form ‖K g‖² for a basis row g, where K has
//! one column per marginal coefficient. The conditional part uses
//! K = L⁻¹ P Dᵀ B (BᵀB)⁻¹ with L the sparse factor of the joint Hessian, so
//! evaluating a grid never needs more than a batch of columns at a time.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MamError, Result};
use crate::family::{normal_critical, Link};
use crate::glmm::{ConditionalFit, ModelStructure};
use crate::marginal::{ghq_rule, jacobian_lambda, Grid, MarginalizedMeans};

/// Largest accepted condition number of BᵀB.
pub const MAX_GRAM_CONDITION: f64 = 1e10;
pub const DEFAULT_BATCH: usize = 256;

/// OLS projection of pseudo-outcomes, kept as its R factor.
#[derive(Debug, Clone)]
pub struct Projection {
    pub alpha: Vec<f64>,
    /// Upper-triangular R with BᵀB = RᵀR.
    pub r: DMatrix<f64>,
    pub gram_condition: f64,
}

impl Projection {
    /// Solves (BᵀB) X = Y for X using R.
    pub fn gram_solve(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let rt = self.r.transpose();
        let a = rt.solve_lower_triangular(y).expect("R checked nonsingular");
        self.r.solve_upper_triangular(&a).expect("R checked nonsingular")
    }
}

/// α̂ = argmin ‖λ̂ − B α‖² by Householder QR. `column_names[j]` names the
/// term owning column j and is used in the rank-deficiency error.
pub fn project_ols(b: &DMatrix<f64>, lambda: &[f64], column_names: &[String]) -> Result<Projection> {
    let (n, q) = b.shape();
    if lambda.len() != n {
        return Err(MamError::InvalidInput(format!(
            "{} pseudo-outcomes for a basis with {n} rows",
            lambda.len()
        )));
    }
    if n < q {
        return Err(MamError::RankDeficient {
            term: format!("fewer rows ({n}) than basis columns ({q})"),
        });
    }
    let qr = b.clone().qr();
    let r = qr.r();
    let svd = r.clone().svd(false, true);
    let sv = &svd.singular_values;
    let (mut imin, mut smin, mut smax) = (0, f64::INFINITY, 0.0f64);
    for (i, &s) in sv.iter().enumerate() {
        if s < smin {
            smin = s;
            imin = i;
        }
        smax = smax.max(s);
    }
    let cond = if smin > 0.0 { (smax / smin).powi(2) } else { f64::INFINITY };
    if !(cond <= MAX_GRAM_CONDITION) {
        let vt = svd.v_t.as_ref().expect("requested");
        let worst = (0..q)
            .max_by(|&a, &c| vt[(imin, a)].abs().total_cmp(&vt[(imin, c)].abs()))
            .unwrap_or(0);
        let term = column_names.get(worst).cloned().unwrap_or_else(|| format!("column {worst}"));
        return Err(MamError::RankDeficient {
            term: format!("{term} (Gram condition number {cond:.3e})"),
        });
    }
    let mut qty = nalgebra::DVector::from_column_slice(lambda);
    qr.q_tr_mul(&mut qty);
    let alpha = r
        .solve_upper_triangular(&qty.rows(0, q).into_owned())
        .expect("nonsingular R");
    Ok(Projection {
        alpha: alpha.as_slice().to_vec(),
        r,
        gram_condition: cond,
    })
}

/// Compact K with its all-zero rows dropped; var(gᵀ·) = ‖K g‖².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceFactor {
    pub k: DMatrix<f64>,
}

impl VarianceFactor {
    pub fn zeros(q: usize) -> Self {
        VarianceFactor { k: DMatrix::zeros(0, q) }
    }

    fn compact(full: DMatrix<f64>) -> Self {
        let keep: Vec<usize> = (0..full.nrows())
            .filter(|&i| full.row(i).iter().any(|v| *v != 0.0))
            .collect();
        let k = DMatrix::from_fn(keep.len(), full.ncols(), |i, j| full[(keep[i], j)]);
        VarianceFactor { k }
    }

    pub fn q(&self) -> usize {
        self.k.ncols()
    }

    /// Coefficient covariance KᵀK.
    pub fn covariance(&self) -> DMatrix<f64> {
        self.k.transpose() * &self.k
    }

    /// ‖K g_i‖² for each row of `g`, computed in column batches of Kgᵀ.
    pub fn pointwise(&self, g: &DMatrix<f64>, batch: usize) -> Vec<f64> {
        assert_eq!(g.ncols(), self.q(), "basis width mismatch");
        let n = g.nrows();
        if self.k.nrows() == 0 {
            return vec![0.0; n];
        }
        let batch = batch.max(1);
        let starts: Vec<usize> = (0..n).step_by(batch).collect();
        let parts: Vec<Vec<f64>> = starts
            .par_iter()
            .map(|&s| {
                let len = batch.min(n - s);
                let gb = g.rows(s, len);
                let v = &self.k * gb.transpose();
                v.column_iter().map(|c| c.iter().map(|x| x * x).sum()).collect()
            })
            .collect();
        parts.concat()
    }
}

/// Σ_i c_i x_i b_iᵀ over the training rows (the α block of Dᵀ B), summed over
/// batches in a fixed order.
fn d_alpha_t_b(mm: &MarginalizedMeans, b: &DMatrix<f64>, batch: usize) -> DMatrix<f64> {
    let (n, q) = b.shape();
    let d = mm.d;
    let batch = batch.max(1);
    let starts: Vec<usize> = (0..n).step_by(batch).collect();
    let parts: Vec<DMatrix<f64>> = starts
        .par_iter()
        .map(|&s| {
            let mut acc = DMatrix::zeros(d, q);
            for i in s..(s + batch).min(n) {
                let c = mm.scale[i];
                if c == 0.0 {
                    continue;
                }
                let x = mm.x_row(i);
                for col in 0..q {
                    let bc = c * b[(i, col)];
                    if bc == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        acc[(j, col)] += x[j] * bc;
                    }
                }
            }
            acc
        })
        .collect();
    parts.into_iter().fold(DMatrix::zeros(d, q), |a, p| a + p)
}

/// K for the variance with (τ, θ) held at their estimates.
pub fn conditional_factor(
    fit: &ConditionalFit,
    mm: &MarginalizedMeans,
    b: &DMatrix<f64>,
    proj: &Projection,
    batch: usize,
) -> Result<VarianceFactor> {
    if mm.n != b.nrows() {
        return Err(MamError::InvalidInput("Jacobian and basis row counts differ".into()));
    }
    let q = b.ncols();
    let joint = fit.design.joint_dim();
    let m_alpha = d_alpha_t_b(mm, b, batch);
    let cols: Vec<Vec<f64>> = (0..q)
        .into_par_iter()
        .map(|c| {
            let mut v = vec![0.0; joint];
            v[..mm.d].copy_from_slice(m_alpha.column(c).as_slice());
            fit.chol.whiten(&v)
        })
        .collect();
    let w = DMatrix::from_fn(joint, q, |i, j| cols[j][i]);
    let compact = VarianceFactor::compact(w);
    let k = proj.gram_solve(&compact.k.transpose()).transpose();
    check_finite(&k)?;
    Ok(VarianceFactor { k })
}

/// K for the (τ, θ) correction; `None` when the outer Hessian is unavailable.
pub fn correction_factor(
    fit: &ConditionalFit,
    mm: &MarginalizedMeans,
    b: &DMatrix<f64>,
    proj: &Projection,
) -> Result<Option<VarianceFactor>> {
    let Some(h_outer) = fit.h_outer.as_ref() else {
        return Ok(None);
    };
    let Some(chol) = h_outer.clone().cholesky() else {
        return Ok(None);
    };
    let free = &fit.free;
    let q = b.ncols();
    // D_outerᵀ B restricted to the free parameters
    let mut m = DMatrix::zeros(free.len(), q);
    for (a, &k) in free.iter().enumerate() {
        for i in 0..mm.n {
            let dv = mm.d_outer[(i, k)];
            if dv != 0.0 {
                for c in 0..q {
                    m[(a, c)] += dv * b[(i, c)];
                }
            }
        }
    }
    let w = chol.l().solve_lower_triangular(&m).expect("PD factor");
    let k = proj.gram_solve(&w.transpose()).transpose();
    check_finite(&k)?;
    Ok(Some(VarianceFactor { k }))
}

fn check_finite(k: &DMatrix<f64>) -> Result<()> {
    if k.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MamError::NotPositiveDefinite("non-finite variance factor".into()))
    }
}

/// (V̂f)_ii at the rows of `b`, which are also the projection rows.
pub fn pointwise_var_conditional(
    fit: &ConditionalFit,
    mm: &MarginalizedMeans,
    b: &DMatrix<f64>,
    proj: &Projection,
    batch: usize,
) -> Result<Vec<f64>> {
    Ok(conditional_factor(fit, mm, b, proj, batch)?.pointwise(b, batch))
}

/// (V̂*)_ii at the rows of `b`; zeros when the correction is unavailable.
pub fn pointwise_var_correction(
    fit: &ConditionalFit,
    mm: &MarginalizedMeans,
    b: &DMatrix<f64>,
    proj: &Projection,
    batch: usize,
) -> Result<Vec<f64>> {
    Ok(match correction_factor(fit, mm, b, proj)? {
        Some(f) => f.pointwise(b, batch),
        None => vec![0.0; b.nrows()],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bands {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Symmetric normal bands est ± z·sqrt(var_cond + var_corr).
pub fn confidence_bands(est: &[f64], var_cond: &[f64], var_corr: &[f64], level: f64) -> Bands {
    let z = normal_critical(level);
    let hw: Vec<f64> = var_cond
        .iter()
        .zip(var_corr)
        .map(|(a, b)| z * (a + b).max(0.0).sqrt())
        .collect();
    Bands {
        lower: est.iter().zip(&hw).map(|(e, h)| e - h).collect(),
        upper: est.iter().zip(&hw).map(|(e, h)| e + h).collect(),
    }
}

/// Maps link-scale band limits through g⁻¹.
pub fn response_scale(link: Link, bands: &Bands) -> Bands {
    Bands {
        lower: bands.lower.iter().map(|v| link.inverse(*v)).collect(),
        upper: bands.upper.iter().map(|v| link.inverse(*v)).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct MamOptions {
    pub level: f64,
    pub batch: usize,
    /// Quadrature nodes per dimension; the model's `ghq_k` when `None`.
    pub ghq_k: Option<usize>,
}

impl Default for MamOptions {
    fn default() -> Self {
        MamOptions {
            level: 0.95,
            batch: DEFAULT_BATCH,
            ghq_k: None,
        }
    }
}

/// The marginal model fitted on the training rows.
#[derive(Debug, Clone)]
pub struct MamFit {
    pub alpha: Vec<f64>,
    pub projection: Projection,
    pub lambda_hat: Vec<f64>,
    pub fitted: Vec<f64>,
    pub var_conditional: Vec<f64>,
    pub var_correction: Vec<f64>,
    pub bands: Bands,
    pub conditional: VarianceFactor,
    pub correction: Option<VarianceFactor>,
    /// Pseudo-outcomes whose quadrature mean was clamped.
    pub clamped: usize,
    pub level: f64,
}

/// Marginalizes, projects, and computes pointwise variances at the training rows.
pub fn fit_mam(fit: &ConditionalFit, opts: &MamOptions) -> Result<MamFit> {
    let st = &fit.structure;
    let rule = ghq_rule(st.m(), opts.ghq_k.unwrap_or(st.ghq_k))?;
    let mm = jacobian_lambda(fit, &Grid::Observed, &rule)?;
    let b = fit.design.x_matrix();
    let names: Vec<String> = (0..b.ncols()).map(|j| st.column_owner(j)).collect();
    let projection = project_ols(&b, &mm.lambda_hat, &names)?;
    let conditional = conditional_factor(fit, &mm, &b, &projection, opts.batch)?;
    let correction = correction_factor(fit, &mm, &b, &projection)?;
    let var_conditional = conditional.pointwise(&b, opts.batch);
    let var_correction = match &correction {
        Some(f) => f.pointwise(&b, opts.batch),
        None => vec![0.0; b.nrows()],
    };
    let alpha_v = nalgebra::DVector::from_column_slice(&projection.alpha);
    let fitted = (&b * alpha_v).as_slice().to_vec();
    let bands = confidence_bands(&fitted, &var_conditional, &var_correction, opts.level);
    if mm.clamped > 0 {
        log::warn!("{} pseudo-outcomes clamped into the mean space", mm.clamped);
    }
    Ok(MamFit {
        alpha: projection.alpha.clone(),
        projection,
        lambda_hat: mm.lambda_hat,
        fitted,
        var_conditional,
        var_correction,
        bands,
        conditional,
        correction,
        clamped: mm.clamped,
        level: opts.level,
    })
}

/// A term's contribution on a covariate grid with pointwise bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub term: String,
    pub x: Vec<f64>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Evaluates gᵀα with var = gᵀ C g for each row g (rows of width d).
pub fn evaluate_rows(
    rows: &DMatrix<f64>,
    alpha: &[f64],
    factors: &[&VarianceFactor],
    batch: usize,
) -> (Vec<f64>, Vec<f64>) {
    let a = nalgebra::DVector::from_column_slice(alpha);
    let est = (rows * a).as_slice().to_vec();
    let mut var = vec![0.0; rows.nrows()];
    for f in factors {
        for (v, p) in var.iter_mut().zip(f.pointwise(rows, batch)) {
            *v += p;
        }
    }
    (est, var)
}

/// Pointwise curve of one term (linear or smooth) on `grid`.
pub fn term_curve(
    structure: &ModelStructure,
    term: usize,
    grid: &[f64],
    alpha: &[f64],
    factors: &[&VarianceFactor],
    level: f64,
) -> Curve {
    let d = structure.d();
    let mut rows = DMatrix::zeros(grid.len(), d);
    for (i, &v) in grid.iter().enumerate() {
        let r = structure.term_row(term, v);
        rows.row_mut(i).copy_from_slice(&r);
    }
    let (estimate, var) = evaluate_rows(&rows, alpha, factors, DEFAULT_BATCH);
    let zeros = vec![0.0; var.len()];
    let bands = confidence_bands(&estimate, &var, &zeros, level);
    Curve {
        term: structure.term_names()[term].clone(),
        x: grid.to_vec(),
        se: var.iter().map(|v| v.max(0.0).sqrt()).collect(),
        estimate,
        lower: bands.lower,
        upper: bands.upper,
    }
}

/// Whitened fixed-effect columns of the joint posterior: var(gᵀα̂^C) = ‖K g‖².
pub fn conditional_coef_factor(fit: &ConditionalFit) -> VarianceFactor {
    let d = fit.design.d;
    let joint = fit.design.joint_dim();
    let cols: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; joint];
            e[j] = 1.0;
            fit.chol.whiten(&e)
        })
        .collect();
    VarianceFactor::compact(DMatrix::from_fn(joint, d, |i, j| cols[j][i]))
}

/// Evenly spaced grid over [lo, hi].
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Reporting grid for a term: the smooth's knot range, or the observed range
/// of a linear covariate (its design column holds the raw value).
pub fn term_grid(fit: &ConditionalFit, term: usize, n: usize) -> Vec<f64> {
    let st = &fit.structure;
    let nl = st.linear_terms.len();
    if term < nl {
        let col = st.linear_column(term);
        let (lo, hi) = (0..fit.design.n)
            .map(|r| fit.design.row(r)[col])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        linspace(lo, hi, n)
    } else {
        let s = &st.smooths[term - nl];
        linspace(s.lower(), s.upper(), n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, q: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, q, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn exact_recovery_in_span() {
        let b = random_matrix(40, 5, 1);
        let c = nalgebra::DVector::from_vec(vec![0.5, -1.0, 2.0, 0.0, 3.0]);
        let y = &b * &c;
        let p = project_ols(&b, y.as_slice(), &[]).unwrap();
        for j in 0..5 {
            assert!((p.alpha[j] - c[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn matches_pseudo_inverse() {
        let b = random_matrix(60, 7, 2);
        let y = random_matrix(60, 1, 3);
        let p = project_ols(&b, y.as_slice(), &[]).unwrap();
        let pinv = b.clone().pseudo_inverse(1e-14).unwrap();
        let oracle = pinv * &y;
        for j in 0..7 {
            assert!((p.alpha[j] - oracle[j]).abs() < 1e-9);
        }
        let resid = &y - &b * nalgebra::DVector::from_vec(p.alpha.clone());
        let orth = (b.transpose() * resid).amax();
        assert!(orth <= 1e-8 * y.norm());
    }

    #[test]
    fn rank_deficiency_names_term() {
        let mut b = random_matrix(30, 3, 4);
        let c0 = b.column(0).into_owned();
        b.column_mut(2).copy_from(&(c0 * 2.0));
        let names = vec!["(Intercept)".to_string(), "x".into(), "s(z)".into()];
        let err = project_ols(&b, &[0.0; 30], &names).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("s(z)") || msg.contains("(Intercept)"), "{msg}");
    }

    #[test]
    fn band_half_width() {
        let b = confidence_bands(&[1.0, 2.0], &[1.0, 0.0], &[0.0, 0.0], 0.95);
        assert!((b.upper[0] - 1.0 - 1.959963984540054).abs() < 1e-12);
        assert_eq!(b.lower[1], 2.0);
        assert_eq!(b.upper[1], 2.0);
        let r = response_scale(Link::Logit, &b);
        assert!(r.lower[0] < r.upper[0]);
    }

    #[test]
    fn pointwise_is_batch_invariant() {
        let f = VarianceFactor { k: random_matrix(9, 4, 5) };
        let g = random_matrix(103, 4, 6);
        let a = f.pointwise(&g, 1);
        let b = f.pointwise(&g, 17);
        let c = f.pointwise(&g, 1000);
        for i in 0..103 {
            assert!((a[i] - b[i]).abs() <= 1e-12 && (a[i] - c[i]).abs() <= 1e-12);
            let kg = &f.k * g.row(i).transpose();
            assert!((a[i] - kg.norm_squared()).abs() <= 1e-12);
        }
    }

    #[test]
    fn linspace_endpoints() {
        let g = linspace(-1.0, 1.0, 5);
        assert_eq!(g, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    }
}
