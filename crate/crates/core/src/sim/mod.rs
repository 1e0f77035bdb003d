//! Monte-Carlo study of GAM, GAMM and MAM on clustered binary data generated
//! from a known marginal mean.

mod report;

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClusteredDataset, ModelSpec, ReStructure, SmoothTermSpec};
use crate::error::{MamError, Result};
use crate::family::{expit, Family, Link};
use crate::glmm::{fit_conditional_with, ConditionalFit, CovarianceParam, FitOptions};
use crate::mam::{conditional_coef_factor, fit_mam, linspace, term_curve, Curve, MamOptions};
use crate::marginal::{ghq_rule, solve_delta, GhqRule};

pub use report::{Cell, ModelRow, StudyReport};

/// Nodes of the one-dimensional rule used to invert the marginal mean when
/// generating data. zᵀu is scalar normal, so one dimension is exact.
pub const GENERATOR_GHQ_K: usize = 100;
pub const COVARIATE_NAMES: [&str; 3] = ["x1", "x2", "x3"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SimRandomEffects {
    Intercept { sigma0: f64 },
    InterceptSlope { sigma0: f64, sigma1: f64, rho: f64 },
}

impl SimRandomEffects {
    pub fn dim(&self) -> usize {
        match self {
            SimRandomEffects::Intercept { .. } => 1,
            SimRandomEffects::InterceptSlope { .. } => 2,
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match *self {
            SimRandomEffects::Intercept { sigma0 } => DMatrix::from_element(1, 1, sigma0 * sigma0),
            SimRandomEffects::InterceptSlope { sigma0, sigma1, rho } => DMatrix::from_row_slice(
                2,
                2,
                &[sigma0 * sigma0, rho * sigma0 * sigma1, rho * sigma0 * sigma1, sigma1 * sigma1],
            ),
        }
    }

    /// Random-effect structure of the fitted model (slope on x3).
    pub fn re_structure(&self) -> ReStructure {
        match self {
            SimRandomEffects::Intercept { .. } => ReStructure::Intercept,
            SimRandomEffects::InterceptSlope { .. } => ReStructure::InterceptSlope { covariate: 2 },
        }
    }

    /// True (σ0, σ1, ρ) with absent entries as `None`.
    pub fn truth(&self) -> [Option<f64>; 3] {
        match *self {
            SimRandomEffects::Intercept { sigma0 } => [Some(sigma0), None, None],
            SimRandomEffects::InterceptSlope { sigma0, sigma1, rho } => [Some(sigma0), Some(sigma1), Some(rho)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    /// f1(x) = sin(πx), f2(x) = 2x² − 2/3.
    #[default]
    Default,
    /// f1 = f2 = 0.
    Zero,
}

impl Truth {
    pub fn f1(self, x: f64) -> f64 {
        match self {
            Truth::Default => (PI * x).sin(),
            Truth::Zero => 0.0,
        }
    }

    pub fn f2(self, x: f64) -> f64 {
        match self {
            Truth::Default => 2.0 * x * x - 2.0 / 3.0,
            Truth::Zero => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub n_clusters: usize,
    pub cluster_size: usize,
    pub random_effects: SimRandomEffects,
    #[serde(default)]
    pub truth: Truth,
    #[serde(default)]
    pub beta3: f64,
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_basis_dim")]
    pub basis_dim: usize,
    #[serde(default = "default_ghq_k")]
    pub ghq_k: usize,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_level")]
    pub level: f64,
}

fn schema_version() -> u32 {
    crate::data::SCHEMA_VERSION
}
fn default_basis_dim() -> usize {
    10
}
fn default_ghq_k() -> usize {
    20
}
fn default_grid_points() -> usize {
    50
}
fn default_level() -> f64 {
    0.95
}

impl Scenario {
    /// Random intercepts and slopes with σ0 = 2, σ1 = 1, ρ = 0.5 and β3 = 0.
    pub fn slopes(n_clusters: usize, cluster_size: usize, replications: usize, seed: u64) -> Self {
        Scenario {
            schema_version: schema_version(),
            name: format!("slopes_N{n_clusters}_n{cluster_size}"),
            n_clusters,
            cluster_size,
            random_effects: SimRandomEffects::InterceptSlope {
                sigma0: 2.0,
                sigma1: 1.0,
                rho: 0.5,
            },
            truth: Truth::Default,
            beta3: 0.0,
            replications,
            seed,
            basis_dim: default_basis_dim(),
            ghq_k: default_ghq_k(),
            grid_points: default_grid_points(),
            level: default_level(),
        }
    }

    /// Random intercepts only.
    pub fn intercepts(sigma0: f64, n_clusters: usize, cluster_size: usize, replications: usize, seed: u64) -> Self {
        Scenario {
            name: format!("intercepts_N{n_clusters}_n{cluster_size}"),
            random_effects: SimRandomEffects::Intercept { sigma0 },
            ..Scenario::slopes(n_clusters, cluster_size, replications, seed)
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| MamError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let s: Scenario = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        match self.random_effects {
            SimRandomEffects::Intercept { sigma0 } => {
                if !(sigma0 > 0.0 && sigma0.is_finite()) {
                    problems.push(format!("sigma0 must be positive, got {sigma0}"));
                }
            }
            SimRandomEffects::InterceptSlope { sigma0, sigma1, rho } => {
                if !(sigma0 > 0.0 && sigma0.is_finite()) {
                    problems.push(format!("sigma0 must be positive, got {sigma0}"));
                }
                if !(sigma1 > 0.0 && sigma1.is_finite()) {
                    problems.push(format!("sigma1 must be positive, got {sigma1}"));
                }
                if !(rho.abs() < 1.0) {
                    problems.push(format!("rho must lie in (-1, 1), got {rho}"));
                }
            }
        }
        if self.n_clusters == 0 || self.cluster_size == 0 {
            problems.push("n_clusters and cluster_size must be positive".into());
        }
        if self.replications == 0 {
            problems.push("replications must be at least 1".into());
        }
        if self.grid_points < 2 {
            problems.push("grid_points must be at least 2".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            problems.push(format!("level must lie in (0, 1), got {}", self.level));
        }
        if !self.beta3.is_finite() {
            problems.push("beta3 must be finite".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(MamError::InvalidInput(format!("invalid scenario: {}", problems.join("; "))))
        }
    }

    /// Target marginal linear predictor at (x1, x2, x3).
    pub fn marginal_eta(&self, x: &[f64]) -> f64 {
        self.truth.f1(x[0]) + self.truth.f2(x[1]) + self.beta3 * x[2]
    }

    /// Model fitted by the GAMM/MAM (and, with `re` = None, the GAM).
    pub fn model_spec(&self, re: ReStructure) -> ModelSpec {
        let smooth = |c| SmoothTermSpec {
            covariate: c,
            basis_dim: self.basis_dim,
            penalty_order: 2,
        };
        ModelSpec {
            family: Family::Bernoulli,
            link: Link::Logit,
            smooth_terms: vec![smooth(0), smooth(1)],
            linear_terms: vec![2],
            re_structure: re,
            ghq_k: self.ghq_k,
        }
    }

    fn rng(&self, replicate: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(replicate as u64);
        rng
    }
}

/// A generated dataset with the random effects that produced it.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub dataset: ClusteredDataset,
    /// Per-cluster u, N x m row-major.
    pub u: Vec<f64>,
    pub m: usize,
}

/// Conditional offset Δ with E_u[expit(Δ + zᵀu)] = expit(target), using the
/// scalar law zᵀu ~ N(0, zᵀΣz).
pub fn generator_delta(target: f64, z: &[f64], sigma: &DMatrix<f64>, rule: &GhqRule) -> Result<f64> {
    let zv = DVector::from_column_slice(z);
    let s2 = (zv.transpose() * sigma * &zv)[0];
    if s2 <= 0.0 {
        return Ok(target);
    }
    let cov = CovarianceParam::diagonal(&[s2.sqrt()]);
    solve_delta(target, &[1.0], &cov, rule, Link::Logit)
}

/// Draws replicate `replicate` of `scenario`; the stream depends only on
/// (seed, replicate).
pub fn generate_dataset(scenario: &Scenario, replicate: usize) -> Result<SimDataset> {
    scenario.validate()?;
    let mut rng = scenario.rng(replicate);
    let rule = ghq_rule(1, GENERATOR_GHQ_K)?;
    let sigma = scenario.random_effects.covariance();
    let m = sigma.nrows();
    let chol = sigma.clone().cholesky().expect("validated covariance").l();
    let re = scenario.random_effects.re_structure();
    let mut u_all = Vec::with_capacity(scenario.n_clusters * m);
    let mut groups = Vec::with_capacity(scenario.n_clusters);
    for c in 0..scenario.n_clusters {
        let e = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = &chol * e;
        u_all.extend(u.iter());
        let mut rows = Vec::with_capacity(scenario.cluster_size);
        for _ in 0..scenario.cluster_size {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z = re.design_row(&x);
            let target = scenario.marginal_eta(&x);
            let delta = generator_delta(target, &z, &sigma, &rule).map_err(|e| {
                MamError::Bracket(format!("scenario '{}', replicate {replicate}: {e}", scenario.name))
            })?;
            let eta = delta + z.iter().zip(u.iter()).map(|(a, b)| a * b).sum::<f64>();
            let y = f64::from(rng.random_bool(expit(eta)));
            rows.push((y, x));
        }
        groups.push((format!("c{c}"), rows));
    }
    let names = COVARIATE_NAMES.iter().map(|s| s.to_string()).collect();
    Ok(SimDataset {
        dataset: ClusteredDataset::from_clusters(groups, names, &re),
        u: u_all,
        m,
    })
}

/// Grid-averaged metrics of one curve against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveMetrics {
    pub bias: f64,
    /// Percent of grid points covered.
    pub coverage: f64,
}

fn curve_metrics(curve: &Curve, truth: impl Fn(f64) -> f64) -> CurveMetrics {
    let n = curve.x.len() as f64;
    let mut bias = 0.0;
    let mut hit = 0.0;
    for i in 0..curve.x.len() {
        let t = truth(curve.x[i]);
        bias += curve.estimate[i] - t;
        if curve.lower[i] <= t && t <= curve.upper[i] {
            hit += 1.0;
        }
    }
    CurveMetrics {
        bias: bias / n,
        coverage: 100.0 * hit / n,
    }
}

/// Variance-component and random-effect prediction metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReMetrics {
    /// Estimated (σ0, σ1, ρ); absent entries `None`.
    pub estimate: [Option<f64>; 3],
    pub bias: [Option<f64>; 3],
    /// RMSEP of (u0, u1).
    pub rmsep: [Option<f64>; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub replicate: usize,
    pub gam: Option<[CurveMetrics; 2]>,
    pub mam: Option<[CurveMetrics; 2]>,
    pub gamm: Option<ReMetrics>,
    /// MAM coverage without the (τ, θ) correction.
    pub mam_naive_coverage: Option<[f64; 2]>,
    pub error: Option<String>,
}

fn re_metrics(fit: &ConditionalFit, sim: &SimDataset, scenario: &Scenario) -> ReMetrics {
    let (sd, rho) = fit.cov().sd_corr();
    let estimate = [sd.first().copied(), sd.get(1).copied(), rho];
    let truth = scenario.random_effects.truth();
    let mut bias = [None; 3];
    for k in 0..3 {
        if let (Some(e), Some(t)) = (estimate[k], truth[k]) {
            bias[k] = Some(e - t);
        }
    }
    let m = sim.m;
    let n = fit.design.n_clusters();
    let mut rmsep = [None; 2];
    for (k, slot) in rmsep.iter_mut().enumerate().take(m) {
        let mse: f64 = (0..n).map(|i| (fit.u_cluster(i)[k] - sim.u[i * m + k]).powi(2)).sum::<f64>() / n as f64;
        *slot = Some(mse.sqrt());
    }
    ReMetrics { estimate, bias, rmsep }
}

/// Reporting grid shared by both smooth covariates.
pub fn evaluation_grid(scenario: &Scenario) -> Vec<f64> {
    linspace(-1.0, 1.0, scenario.grid_points)
}

/// Fits GAM, GAMM and MAM to replicate `r` and scores them.
pub fn run_replication(scenario: &Scenario, r: usize) -> ReplicateMetrics {
    let mut out = ReplicateMetrics {
        replicate: r,
        gam: None,
        mam: None,
        gamm: None,
        mam_naive_coverage: None,
        error: None,
    };
    if let Err(e) = score_replication(scenario, r, &mut out) {
        out.error = Some(e.to_string());
    }
    out
}

fn score_replication(scenario: &Scenario, r: usize, out: &mut ReplicateMetrics) -> Result<()> {
    let sim = generate_dataset(scenario, r)?;
    let grid = evaluation_grid(scenario);
    let truths: [fn(Truth, f64) -> f64; 2] = [Truth::f1, Truth::f2];
    let truth = scenario.truth;
    let opts = FitOptions::default();
    // smooth terms follow the single linear term
    let smooth_term = |l: usize| 1 + l;

    let gam_data = sim.dataset.with_re_structure(&ReStructure::None);
    let gam = fit_conditional_with(&gam_data, &scenario.model_spec(ReStructure::None), &opts)?;
    let gam_factor = conditional_coef_factor(&gam);
    let gam_metrics = [0, 1].map(|l| {
        let c = term_curve(&gam.structure, smooth_term(l), &grid, gam.alpha(), &[&gam_factor], scenario.level);
        curve_metrics(&c, |x| truths[l](truth, x))
    });
    out.gam = Some(gam_metrics);

    let re = scenario.random_effects.re_structure();
    let gamm = fit_conditional_with(&sim.dataset, &scenario.model_spec(re), &opts)?;
    out.gamm = Some(re_metrics(&gamm, &sim, scenario));

    let mam = fit_mam(&gamm, &MamOptions { level: scenario.level, ..MamOptions::default() })?;
    let mut factors = vec![&mam.conditional];
    if let Some(c) = &mam.correction {
        factors.push(c);
    }
    let mut naive = [0.0; 2];
    let mam_metrics = [0, 1].map(|l| {
        let c = term_curve(&gamm.structure, smooth_term(l), &grid, &mam.alpha, &factors, scenario.level);
        let nc = term_curve(&gamm.structure, smooth_term(l), &grid, &mam.alpha, &[&mam.conditional], scenario.level);
        naive[l] = curve_metrics(&nc, |x| truths[l](truth, x)).coverage;
        curve_metrics(&c, |x| truths[l](truth, x))
    });
    out.mam = Some(mam_metrics);
    out.mam_naive_coverage = Some(naive);
    Ok(())
}

/// Runs all replications (in parallel, results in replicate order) and
/// aggregates them.
pub fn run_study(scenario: &Scenario) -> Result<StudyReport> {
    scenario.validate()?;
    let reps: Vec<ReplicateMetrics> = (0..scenario.replications)
        .into_par_iter()
        .map(|r| {
            let m = run_replication(scenario, r);
            if let Some(e) = &m.error {
                log::warn!("replicate {r} failed: {e}");
            } else {
                log::debug!("replicate {r} done");
            }
            m
        })
        .collect();
    Ok(StudyReport::aggregate(scenario, reps))
}
