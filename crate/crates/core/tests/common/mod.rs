//! Shared fixtures and independent oracles for the integration tests. Every
//! check returns the measured discrepancy so the acceptance report can print
//! it next to the threshold.
#![allow(dead_code)]

use std::f64::consts::PI;

use mam::data::{ClusteredDataset, ModelSpec, ReStructure, SmoothTermSpec};
use mam::family::{expit, norm_cdf, Family, Link};
use mam::glmm::{fit_conditional_with, CovarianceParam, FitOptions, Objective};
use mam::glmm::ConditionalFit;
use mam::mam::{pointwise_var_conditional, pointwise_var_correction, project_ols};
use mam::marginal::link::marginalize_eta;
use mam::marginal::{ghq_rule, jacobian_lambda, solve_delta, Grid};
use mam::sim::{generate_dataset, generator_delta, Scenario, SimDataset, SimRandomEffects, GENERATOR_GHQ_K};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Simulation design shrunk for tests: small bases, few clusters.
pub fn small_scenario(re: SimRandomEffects, n_clusters: usize, per: usize, seed: u64) -> Scenario {
    let mut s = match re {
        SimRandomEffects::Intercept { sigma0 } => Scenario::intercepts(sigma0, n_clusters, per, 1, seed),
        SimRandomEffects::InterceptSlope { .. } => Scenario::slopes(n_clusters, per, 1, seed),
    };
    s.random_effects = re;
    s.basis_dim = 6;
    s.ghq_k = 10;
    s
}

pub fn slopes() -> SimRandomEffects {
    SimRandomEffects::InterceptSlope {
        sigma0: 1.5,
        sigma1: 0.8,
        rho: 0.3,
    }
}

pub fn intercept(sigma0: f64) -> SimRandomEffects {
    SimRandomEffects::Intercept { sigma0 }
}

pub fn simulate(s: &Scenario) -> SimDataset {
    generate_dataset(s, 0).expect("simulated dataset")
}

pub fn fit_scenario(s: &Scenario, opts: &FitOptions) -> (SimDataset, ConditionalFit) {
    let sim = simulate(s);
    let spec = s.model_spec(s.random_effects.re_structure());
    let fit = fit_conditional_with(&sim.dataset, &spec, opts).expect("conditional fit");
    (sim, fit)
}

/// Fixed hyperparameters keep toy instances away from the boundary, where
/// the correction is switched off.
pub fn fixed_psi_options(psi: Vec<f64>) -> FitOptions {
    FitOptions {
        initial_psi: Some(psi),
        fixed_psi: true,
        ..FitOptions::default()
    }
}

/// ψ = (log τ per smooth, θ) with θ the log-Cholesky of a moderate Σ.
pub fn moderate_psi(n_smooths: usize, m: usize) -> Vec<f64> {
    let mut psi = vec![1.0; n_smooths];
    match m {
        0 => {}
        1 => psi.push(0.5f64.ln()),
        _ => psi.extend([0.0, 0.3, 0.6f64.ln()]),
    }
    psi
}

pub fn permute_clusters(ds: &ClusteredDataset, perm: &[usize]) -> ClusteredDataset {
    let mut out = ds.clone();
    out.clusters = perm.iter().map(|&i| ds.clusters[i].clone()).collect();
    out
}

pub fn reversed(n: usize) -> Vec<usize> {
    (0..n).rev().collect()
}

/// Adaptive Simpson quadrature with a relative/absolute stopping rule.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            return left + right + diff / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    // split first so narrow peaks are not missed by the initial estimate
    let pieces = 64;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|k| {
            let (lo, hi) = (a + k as f64 * h, a + (k + 1) as f64 * h);
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            rec(f, lo, hi, fa, fm, fb, whole, tol / pieces as f64, 40)
        })
        .sum()
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// E[expit(η + σZ)] by adaptive quadrature.
pub fn logit_marginal_mean(eta: f64, sigma: f64) -> f64 {
    let f = |z: f64| expit(eta + sigma * z) * std_normal_pdf(z);
    adaptive_simpson(&f, -40.0, 40.0, 1e-15)
}

fn intercept_lambda(sigma: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, sigma)
}

/// Max |Φ(λ̂) − Φ(η/√(1+σ²))| over random (η, σ) pairs.
pub fn probit_closed_form_error(pairs: usize, k: usize, seed: u64) -> f64 {
    let rule = ghq_rule(1, k).unwrap();
    let mut r = rng(seed);
    (0..pairs)
        .map(|_| {
            let eta = r.random_range(-3.0..=3.0);
            let sigma = r.random_range(0.1..=3.0);
            let (lam, _) = marginalize_eta(Link::Probit, eta, &[1.0], &intercept_lambda(sigma), &rule);
            (norm_cdf(lam) - norm_cdf(eta / (1.0 + sigma * sigma).sqrt())).abs()
        })
        .fold(0.0, f64::max)
}

/// Max |expit(λ̂) − adaptive-quadrature mean| over random (η, σ) pairs.
pub fn logit_quadrature_error(pairs: usize, k: usize, seed: u64) -> f64 {
    let rule = ghq_rule(1, k).unwrap();
    let mut r = rng(seed);
    (0..pairs)
        .map(|_| {
            let eta = r.random_range(-3.0..=3.0);
            let sigma = r.random_range(0.1..=3.0);
            let (lam, _) = marginalize_eta(Link::Logit, eta, &[1.0], &intercept_lambda(sigma), &rule);
            (expit(lam) - logit_marginal_mean(eta, sigma)).abs()
        })
        .fold(0.0, f64::max)
}

/// Max error of marginal_link∘solve_delta and solve_delta∘marginal_link over
/// random links, covariances and design rows.
pub fn inversion_round_trip_error(configs: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for c in 0..configs {
        let link = if c % 2 == 0 { Link::Logit } else { Link::Probit };
        let m = 1 + c % 3 / 2;
        let cov = if m == 1 {
            CovarianceParam::diagonal(&[r.random_range(0.1..=3.0)])
        } else {
            let (s0, s1, rho): (f64, f64, f64) =
                (r.random_range(0.1..=3.0), r.random_range(0.1..=2.0), r.random_range(-0.9..=0.9));
            let sigma = DMatrix::from_row_slice(2, 2, &[s0 * s0, rho * s0 * s1, rho * s0 * s1, s1 * s1]);
            CovarianceParam::from_covariance(&sigma).unwrap()
        };
        let z: Vec<f64> = if m == 1 { vec![1.0] } else { vec![1.0, r.random_range(-1.0..=1.0)] };
        let rule = ghq_rule(m, 20).unwrap();
        let lam = cov.lambda();
        let target = r.random_range(-3.0..=3.0);
        let delta = solve_delta(target, &z, &cov, &rule, link).unwrap();
        let back = marginalize_eta(link, delta, &z, &lam, &rule).0;
        worst = worst.max((back - target).abs());
        let eta = r.random_range(-3.0..=3.0);
        let fwd = marginalize_eta(link, eta, &z, &lam, &rule).0;
        let again = solve_delta(fwd, &z, &cov, &rule, link).unwrap();
        worst = worst.max((again - eta).abs());
    }
    worst
}

/// Monte-Carlo marginal mean of y under the generator at target λ with a
/// random intercept: (empirical mean, MC standard error, expit(λ)).
pub fn generator_monte_carlo(sigma0: f64, target: f64, draws: usize, seed: u64) -> (f64, f64, f64) {
    let rule = ghq_rule(1, GENERATOR_GHQ_K).unwrap();
    let sigma = DMatrix::from_element(1, 1, sigma0 * sigma0);
    let delta = generator_delta(target, &[1.0], &sigma, &rule).unwrap();
    let mut r = rng(seed);
    let mut hits = 0usize;
    for _ in 0..draws {
        let u: f64 = sigma0 * r.sample::<f64, _>(StandardNormal);
        if r.random_bool(expit(delta + u)) {
            hits += 1;
        }
    }
    let p = hits as f64 / draws as f64;
    let truth = expit(target);
    (p, (truth * (1.0 - truth) / draws as f64).sqrt(), truth)
}

/// Dense oracle for both pointwise variances at the training rows:
/// P D H⁻¹ Dᵀ P and P D_o H_o⁻¹ D_oᵀ P with P the hat matrix of B.
pub fn dense_variances(fit: &ConditionalFit) -> (Vec<f64>, Vec<f64>) {
    let rule = ghq_rule(fit.structure.m(), fit.structure.ghq_k).unwrap();
    let mm = jacobian_lambda(fit, &Grid::Observed, &rule).unwrap();
    let b = fit.design.x_matrix();
    let gram_inv = (b.transpose() * &b).try_inverse().expect("full-rank basis");
    let hat = &b * gram_inv * b.transpose();
    let dj = mm.d_joint_dense();
    let h = fit.h_joint.to_dense();
    let hinv_dt = h.cholesky().expect("PD joint Hessian").solve(&dj.transpose());
    let vf = &hat * (&dj * hinv_dt) * &hat;
    let n = b.nrows();
    let vstar = match &fit.h_outer {
        Some(ho) => {
            let dof = DMatrix::from_fn(n, fit.free.len(), |i, a| mm.d_outer[(i, fit.free[a])]);
            let inner = &dof * ho.clone().try_inverse().unwrap() * dof.transpose();
            (&hat * inner * &hat).diagonal().as_slice().to_vec()
        }
        None => vec![0.0; n],
    };
    (vf.diagonal().as_slice().to_vec(), vstar)
}

/// The sparse pipeline's pointwise variances at the training rows.
pub fn sparse_variances(fit: &ConditionalFit, batch: usize) -> (Vec<f64>, Vec<f64>) {
    let rule = ghq_rule(fit.structure.m(), fit.structure.ghq_k).unwrap();
    let mm = jacobian_lambda(fit, &Grid::Observed, &rule).unwrap();
    let b = fit.design.x_matrix();
    let names: Vec<String> = (0..b.ncols()).map(|j| fit.structure.column_owner(j)).collect();
    let proj = project_ols(&b, &mm.lambda_hat, &names).unwrap();
    (
        pointwise_var_conditional(fit, &mm, &b, &proj, batch).unwrap(),
        pointwise_var_correction(fit, &mm, &b, &proj, batch).unwrap(),
    )
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Sparse vs dense variance discrepancies over `instances` random toys with
/// d + N m ≤ 400: (max conditional error, max correction error, instances
/// that had a correction term).
pub fn sparse_dense_errors(instances: usize, seed: u64) -> (f64, f64, usize) {
    let mut r = rng(seed);
    let (mut ec, mut es, mut with_corr) = (0.0f64, 0.0f64, 0);
    for k in 0..instances {
        let slopes_design = k % 2 == 1;
        let n_clusters = r.random_range(20..=40);
        let per = r.random_range(5..=8);
        let re = if slopes_design { slopes() } else { intercept(r.random_range(1.0..=2.0)) };
        let s = small_scenario(re, n_clusters, per, seed * 1000 + k as u64);
        // optimized ψ, so the outer Hessian is usually available
        let (_, fit) = fit_scenario(&s, &FitOptions::default());
        assert!(fit.design.joint_dim() <= 400);
        let (dc, ds) = dense_variances(&fit);
        let (sc, ss) = sparse_variances(&fit, 1 + k % 5);
        ec = ec.max(max_abs_diff(&dc, &sc));
        es = es.max(max_abs_diff(&ds, &ss));
        if fit.h_outer.is_some() {
            with_corr += 1;
        }
    }
    (ec, es, with_corr)
}

/// Measured errors of the derivative suite on one toy fit.
#[derive(Debug, Clone, Copy)]
pub struct DerivativeErrors {
    /// Relative error of the objective gradient.
    pub gradient: f64,
    /// Relative error of the objective Hessian.
    pub hessian: f64,
    /// Relative error of the α block of D_joint; the u block is exactly zero.
    pub d_joint: f64,
    /// Relative error of total D_outer against refitting at perturbed ψ.
    pub d_outer: f64,
}

fn rel(fd: f64, an: f64, floor: f64) -> f64 {
    (fd - an).abs() / an.abs().max(floor)
}

pub fn derivative_errors(re: SimRandomEffects, seed: u64) -> DerivativeErrors {
    let s = small_scenario(re, 5, 12, seed);
    let m = s.random_effects.dim();
    let psi = moderate_psi(2, m);
    let (_, fit) = fit_scenario(&s, &fixed_psi_options(psi.clone()));
    let obj = Objective::new(&fit.structure, &fit.design);

    // objective derivatives at a point away from the mode
    let mut r = rng(seed + 17);
    let beta: Vec<f64> = fit.beta.iter().map(|b| b + r.random_range(-0.3..0.3)).collect();
    let h = fit.layout.hyper(m, &psi);
    let e = obj.evaluate(&beta, &h, true, true).unwrap();
    let hd = e.hess.unwrap().to_dense();
    let (mut eg, mut eh) = (0.0f64, 0.0f64);
    for j in 0..beta.len() {
        let step = 1e-6 * (1.0 + beta[j].abs());
        let mut bp = beta.clone();
        bp[j] += step;
        let mut bm = beta.clone();
        bm[j] -= step;
        let (fp, gp) = obj.value_grad(&bp, &h).unwrap();
        let (fm, gm) = obj.value_grad(&bm, &h).unwrap();
        eg = eg.max(rel((fp - fm) / (2.0 * step), e.grad[j], 1.0));
        for i in 0..beta.len() {
            eh = eh.max(rel((gp[i] - gm[i]) / (2.0 * step), hd[(i, j)], 1.0));
        }
    }

    // D_joint: perturb α with θ fixed
    let rule = ghq_rule(m, fit.structure.ghq_k).unwrap();
    let mm = jacobian_lambda(&fit, &Grid::Observed, &rule).unwrap();
    let lam = fit.cov().lambda();
    let link = fit.structure.link;
    let lambda_at = |alpha: &[f64], lam: &DMatrix<f64>, i: usize| -> f64 {
        let x = fit.design.row(i);
        let eta: f64 = x.iter().zip(alpha).map(|(a, b)| a * b).sum();
        marginalize_eta(link, eta, fit.design.z_row(i), lam, &rule).0
    };
    let alpha = fit.alpha().to_vec();
    let scale_j = mm.d_joint_dense().abs().max();
    let mut ej: f64 = 0.0;
    for j in 0..alpha.len() {
        let step = 1e-6;
        let mut ap = alpha.clone();
        ap[j] += step;
        let mut am = alpha.clone();
        am[j] -= step;
        for i in 0..fit.design.n {
            let fd = (lambda_at(&ap, &lam, i) - lambda_at(&am, &lam, i)) / (2.0 * step);
            ej = ej.max(rel(fd, mm.d_alpha_row(i)[j], 1e-2 * scale_j));
        }
    }

    // total D_outer: refit with ψ perturbed, re-marginalize
    let mut eo: f64 = 0.0;
    for &k in &fit.free {
        let step = 1e-3;
        let lam_refit = |delta: f64| -> Vec<f64> {
            let mut p = psi.clone();
            p[k] += delta;
            let (_, f2) = fit_scenario(&s, &fixed_psi_options(p));
            let l2 = f2.cov().lambda();
            (0..f2.design.n)
                .map(|i| {
                    let eta: f64 = f2.design.row(i).iter().zip(f2.alpha()).map(|(a, b)| a * b).sum();
                    marginalize_eta(link, eta, f2.design.z_row(i), &l2, &rule).0
                })
                .collect()
        };
        let (lp, lm) = (lam_refit(step), lam_refit(-step));
        let col = mm.d_outer.column(k);
        let colmax = col.abs().max();
        for i in 0..fit.design.n {
            let fd = (lp[i] - lm[i]) / (2.0 * step);
            eo = eo.max((fd - col[i]).abs() / colmax.max(1e-8));
        }
    }
    DerivativeErrors {
        gradient: eg,
        hessian: eh,
        d_joint: ej,
        d_outer: eo,
    }
}

/// Gaussian clustered data for exactness checks.
pub fn gaussian_dataset(n_clusters: usize, per: usize, re: &ReStructure, seed: u64) -> ClusteredDataset {
    let mut r = rng(seed);
    let groups = (0..n_clusters)
        .map(|c| {
            let u0: f64 = 0.7 * r.sample::<f64, _>(StandardNormal);
            let rows = (0..per)
                .map(|_| {
                    let x: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
                    let e: f64 = r.sample(StandardNormal);
                    ((PI * x[0]).sin() + 0.5 * x[1] + u0 + 0.3 * e, x)
                })
                .collect();
            (format!("g{c}"), rows)
        })
        .collect();
    ClusteredDataset::from_clusters(groups, vec!["a".into(), "b".into()], re)
}

pub fn gaussian_spec(re: ReStructure) -> ModelSpec {
    ModelSpec {
        family: Family::Gaussian,
        link: Link::Identity,
        smooth_terms: vec![SmoothTermSpec {
            covariate: 0,
            basis_dim: 8,
            penalty_order: 2,
        }],
        linear_terms: vec![1],
        re_structure: re,
        ghq_k: 5,
    }
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
