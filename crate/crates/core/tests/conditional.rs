mod common;

use std::f64::consts::PI;

use common::*;
use mam::data::{ClusteredDataset, ModelSpec, ReStructure};
use mam::family::{Family, Link};
use mam::glmm::{fit_conditional_with, ConditionalFit, FitOptions};
use mam::glmm::fit::predict_conditional;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn intercept_only(re: ReStructure) -> ModelSpec {
    ModelSpec {
        family: Family::Bernoulli,
        link: Link::Logit,
        smooth_terms: vec![],
        linear_terms: vec![],
        re_structure: re,
        ghq_k: 10,
    }
}

/// Bernoulli clusters with the given success counts out of `per` rows.
fn counts_dataset(successes: &[usize], per: usize) -> ClusteredDataset {
    let groups = successes
        .iter()
        .enumerate()
        .map(|(c, &k)| {
            let rows = (0..per).map(|j| (f64::from(j < k), vec![0.0])).collect();
            (format!("c{c}"), rows)
        })
        .collect();
    ClusteredDataset::from_clusters(groups, vec!["x".into()], &ReStructure::Intercept)
}

fn log_lik(k: usize, n: usize, s: f64) -> f64 {
    // k s − n log(1 + e^s), stable in both tails
    k as f64 * s - n as f64 * (s.max(0.0) + (-s.abs()).exp().ln_1p())
}

/// log ∫ dα₀ Π_i ∫ exp(l_i(α₀ + σz)) φ(z) dz by nested adaptive quadrature.
fn exact_log_marginal(successes: &[usize], per: usize, sigma: f64) -> f64 {
    let peak: Vec<f64> = successes
        .iter()
        .map(|&k| {
            let p = (k as f64 / per as f64).clamp(1e-3, 1.0 - 1e-3);
            log_lik(k, per, (p / (1.0 - p)).ln())
        })
        .collect();
    let outer = |a0: f64| -> f64 {
        successes
            .iter()
            .zip(&peak)
            .map(|(&k, &pk)| {
                let f = |z: f64| (log_lik(k, per, a0 + sigma * z) - pk).exp() * std_normal_pdf(z);
                adaptive_simpson(&f, -12.0, 12.0, 1e-13)
            })
            .product()
    };
    adaptive_simpson(&outer, -15.0, 15.0, 1e-12).ln() + peak.iter().sum::<f64>()
}

#[test]
fn laml_matches_quadrature_for_one_cluster() {
    // with a single cluster the flat intercept absorbs u, so σ drops out
    let per = 400;
    let ds = counts_dataset(&[150], per);
    let sigma: f64 = 0.5;
    let fit = fit_conditional_with(
        &ds,
        &intercept_only(ReStructure::Intercept),
        &fixed_psi_options(vec![sigma.ln()]),
    )
    .unwrap();
    let exact = exact_log_marginal(&[150], per, sigma);
    assert!((fit.laml - exact).abs() <= 1e-3);
}

fn two_cluster_laml_error(scale: usize) -> f64 {
    let per = 60 * scale;
    let counts = [21 * scale, 38 * scale];
    let ds = counts_dataset(&counts, per);
    let sigma: f64 = 0.5;
    let fit = fit_conditional_with(
        &ds,
        &intercept_only(ReStructure::Intercept),
        &fixed_psi_options(vec![sigma.ln()]),
    )
    .unwrap();
    (fit.laml - exact_log_marginal(&counts, per, sigma)).abs()
}

#[test]
fn laml_error_shrinks_with_cluster_size() {
    // with two clusters u is not absorbed and the Laplace error is O(1/n_i)
    let coarse = two_cluster_laml_error(1);
    let fine = two_cluster_laml_error(4);
    assert!(coarse <= 2e-2, "n_i = 60: {coarse:e}");
    assert!(fine <= 2.5e-3, "n_i = 240: {fine:e}");
    assert!(coarse / fine >= 3.0, "{coarse:e} -> {fine:e}");
}

#[test]
fn huge_tau_collapses_smooths_to_null_space() {
    let s = small_scenario(intercept(1.0), 20, 8, 5);
    let (_, fit) = fit_scenario(&s, &fixed_psi_options(vec![19.0, 19.0, 0.0]));
    for l in 0..fit.structure.n_smooths() {
        let c = fit.structure.penalized_columns(l);
        let norm: f64 = fit.alpha()[c.start..c.start + c.len].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1e-6, "smooth {l}: range norm {norm:e}");
    }
}

fn dense_z(fit: &ConditionalFit) -> DMatrix<f64> {
    let des = &fit.design;
    let mut z = DMatrix::zeros(des.n, des.n_clusters() * des.m);
    for i in 0..des.n_clusters() {
        for r in des.cluster_ptr[i]..des.cluster_ptr[i + 1] {
            for k in 0..des.m {
                z[(r, i * des.m + k)] = des.z_row(r)[k];
            }
        }
    }
    z
}

/// Restricted log-likelihood of y ~ N(X_F β, σ²I + X_R X_Rᵀ/τ + Z Σ Zᵀ)
/// with β flat, from dense matrices.
fn dense_reml(fit: &ConditionalFit, psi: &[f64]) -> f64 {
    let h = fit.layout.hyper(fit.design.m, psi);
    let x = fit.design.x_matrix();
    let c = fit.structure.penalized_columns(0);
    let fixed: Vec<usize> = (0..x.ncols()).filter(|j| *j < c.start || *j >= c.start + c.len).collect();
    let xf = x.select_columns(&fixed);
    let xr = x.columns(c.start, c.len).into_owned();
    let z = dense_z(fit);
    let sig = DMatrix::from_fn(z.ncols(), z.ncols(), |i, j| {
        let m = fit.design.m;
        if i / m == j / m {
            h.cov.sigma()[(i % m, j % m)]
        } else {
            0.0
        }
    });
    let n = x.nrows();
    let tau = h.log_tau[0].exp();
    let v = DMatrix::identity(n, n) * h.scale.powi(2) + &xr * xr.transpose() / tau + &z * sig * z.transpose();
    let y = DVector::from_column_slice(&fit.design.y);
    let vc = v.cholesky().unwrap();
    let logdet_v = 2.0 * vc.l().diagonal().map(f64::ln).sum();
    let vix = vc.solve(&xf);
    let xc = (xf.transpose() * &vix).cholesky().unwrap();
    let logdet_x = 2.0 * xc.l().diagonal().map(f64::ln).sum();
    let beta = xc.solve(&(vix.transpose() * &y));
    let r = &y - &xf * beta;
    let q = (r.transpose() * vc.solve(&r))[0];
    -0.5 * logdet_v - 0.5 * logdet_x - 0.5 * q - 0.5 * (n - xf.ncols()) as f64 * (2.0 * PI).ln()
}

/// Joint mode (α, u) of the Gaussian model by a dense penalized solve.
fn dense_mode(fit: &ConditionalFit, psi: &[f64]) -> Vec<f64> {
    let h = fit.layout.hyper(fit.design.m, psi);
    let x = fit.design.x_matrix();
    let z = dense_z(fit);
    let (n, d, q) = (x.nrows(), x.ncols(), z.ncols());
    let w = DMatrix::from_fn(n, d + q, |i, j| if j < d { x[(i, j)] } else { z[(i, j - d)] });
    let s2 = h.scale.powi(2);
    let mut a = w.transpose() * &w / s2;
    let c = fit.structure.penalized_columns(0);
    for j in c.start..c.start + c.len {
        a[(j, j)] += h.log_tau[0].exp();
    }
    let m = fit.design.m;
    let si = h.cov.sigma_inv();
    for i in 0..q / m {
        for r in 0..m {
            for s in 0..m {
                a[(d + i * m + r, d + i * m + s)] += si[(r, s)];
            }
        }
    }
    let y = DVector::from_column_slice(&fit.design.y);
    let rhs = w.transpose() * y / s2;
    a.cholesky().unwrap().solve(&rhs).as_slice().to_vec()
}

#[test]
fn gaussian_outer_optimum_matches_dense_reml() {
    let ds = gaussian_dataset(12, 7, &ReStructure::Intercept, 21);
    let fit = fit_conditional_with(&ds, &gaussian_spec(ReStructure::Intercept), &FitOptions::default()).unwrap();
    let psi = fit.psi.clone();
    let at_opt = dense_reml(&fit, &psi);
    assert!((fit.laml - at_opt).abs() <= 1e-8 * (1.0 + at_opt.abs()), "{} vs {at_opt}", fit.laml);
    // ψ̂ is a stationary point of the dense criterion
    for k in 0..psi.len() {
        let h = 1e-4;
        let mut pp = psi.clone();
        pp[k] += h;
        let mut pm = psi.clone();
        pm[k] -= h;
        let g = (dense_reml(&fit, &pp) - dense_reml(&fit, &pm)) / (2.0 * h);
        assert!(g.abs() <= 1e-3, "dense gradient {k}: {g:e}");
        pp[k] = psi[k] + 0.05;
        pm[k] = psi[k] - 0.05;
        assert!(dense_reml(&fit, &pp) <= at_opt && dense_reml(&fit, &pm) <= at_opt);
    }
    let mode = dense_mode(&fit, &psi);
    let err = max_abs_diff(&mode, &fit.beta);
    assert!(err <= 1e-6, "mode error {err:e}");
}

#[test]
fn cluster_permutation_leaves_estimates_unchanged() {
    let s = small_scenario(slopes(), 30, 8, 8);
    let sim = simulate(&s);
    let spec = s.model_spec(s.random_effects.re_structure());
    let a = fit_conditional_with(&sim.dataset, &spec, &FitOptions::default()).unwrap();
    let perm = reversed(sim.dataset.n_clusters());
    let b = fit_conditional_with(&permute_clusters(&sim.dataset, &perm), &spec, &FitOptions::default()).unwrap();
    let dpsi = max_abs_diff(&a.psi, &b.psi);
    let dalpha = max_abs_diff(a.alpha(), b.alpha());
    assert!(dpsi <= 1e-10 && dalpha <= 1e-10, "psi {dpsi:e} alpha {dalpha:e}");
    // û follows its cluster
    for (new, &old) in perm.iter().enumerate() {
        assert!(max_abs_diff(a.u_cluster(old), b.u_cluster(new)) <= 1e-10);
    }
}

#[test]
fn fitted_mode_satisfies_structural_invariants() {
    let s = small_scenario(slopes(), 15, 6, 9);
    let (_, fit) = fit_scenario(&s, &FitOptions::default());
    let d = fit.diagnostics.inner_gradient_norm;
    assert!(d <= 1e-6 * (1.0 + fit.laml.abs()));
    let h = fit.h_joint.to_dense();
    let (dd, m) = (fit.design.d, fit.design.m);
    for i in 0..fit.design.n_clusters() {
        for j in 0..fit.design.n_clusters() {
            if i == j {
                continue;
            }
            for r in 0..m {
                for c in 0..m {
                    assert_eq!(h[(dd + i * m + r, dd + j * m + c)], 0.0);
                }
            }
        }
    }
    assert!(h.cholesky().is_some());
}

#[test]
fn conditional_prediction_identities() {
    let ds = gaussian_dataset(6, 5, &ReStructure::Intercept, 4);
    let fit = fit_conditional_with(&ds, &gaussian_spec(ReStructure::Intercept), &FitOptions::default()).unwrap();
    let mut r = rng(2);
    let x: Vec<Vec<f64>> = (0..20).map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
    let pred = predict_conditional(&fit, &x, &[0.0]);
    for (xi, p) in x.iter().zip(&pred) {
        let b: f64 = fit.structure.design_row(xi).iter().zip(fit.alpha()).map(|(a, c)| a * c).sum();
        assert!((p - b).abs() <= 1e-12);
    }

    let s = small_scenario(intercept(1.0), 10, 6, 3);
    let (_, mut logit) = fit_scenario(&s, &fixed_psi_options(moderate_psi(2, 1)));
    logit.beta.iter_mut().for_each(|b| *b = 0.0);
    let p = predict_conditional(&logit, &[vec![0.3, -0.2, 0.9]], &[0.0]);
    assert_eq!(p[0], 0.5);
    // monotone along the linear coefficient
    logit.beta[1] = 0.5;
    let xs: Vec<Vec<f64>> = (0..5).map(|k| vec![0.0, 0.0, -1.0 + 0.5 * k as f64]).collect();
    let p = predict_conditional(&logit, &xs, &[0.0]);
    assert!(p.windows(2).all(|w| w[0] < w[1]));
}

// This design drifts to a perfectly correlated random-effect covariance.
#[test]
fn singular_covariance_limit_is_smooth_and_reachable() {
    let s = small_scenario(slopes(), 37, 6, 5011);
    let sim = simulate(&s);
    let spec = s.model_spec(s.random_effects.re_structure());
    let laml_at = |log_l11: f64| {
        let psi = vec![0.3, -0.29, -0.388, -0.224, log_l11];
        fit_conditional_with(&sim.dataset, &spec, &fixed_psi_options(psi)).unwrap().laml
    };
    // the LAML tends to a finite limit as L11 → 0, so it flattens out
    let deep = [-10.0, -12.0, -13.0, -13.8].map(laml_at);
    assert!(deep.iter().all(|v| (v - deep[3]).abs() <= 1e-8), "{deep:?}");
    // and stays smooth on the finite-difference scale of the outer optimizer
    for x in [-12.0, -13.0] {
        let (a, b, c) = (laml_at(x - 1e-4), laml_at(x), laml_at(x + 1e-4));
        assert!((a - 2.0 * b + c).abs() <= 1e-10, "{x}: {a} {b} {c}");
    }
    let fit = fit_conditional_with(&sim.dataset, &spec, &FitOptions::default()).unwrap();
    assert!(fit.laml >= deep[3] - 1e-6);
}
