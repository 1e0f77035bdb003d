//! Log-Cholesky parameterization of the random-effect covariance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Σ(θ) = Λ Λᵀ with Λ lower triangular. θ lists Λ row by row; diagonal
/// entries are stored as logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParam {
    pub m: usize,
    pub theta: Vec<f64>,
}

pub fn n_params(m: usize) -> usize {
    m * (m + 1) / 2
}

/// Position of Λ[i][j] (j ≤ i) in θ.
pub fn theta_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl CovarianceParam {
    pub fn new(m: usize, theta: Vec<f64>) -> Self {
        assert_eq!(theta.len(), n_params(m));
        CovarianceParam { m, theta }
    }

    /// Σ = diag(sd²), i.e. θ with log standard deviations and zero
    /// off-diagonals.
    pub fn diagonal(sd: &[f64]) -> Self {
        let m = sd.len();
        let mut theta = vec![0.0; n_params(m)];
        for (i, s) in sd.iter().enumerate() {
            theta[theta_index(i, i)] = s.ln();
        }
        CovarianceParam { m, theta }
    }

    /// Parameters reproducing a given SPD covariance.
    pub fn from_covariance(sigma: &DMatrix<f64>) -> Option<Self> {
        let m = sigma.nrows();
        let l = sigma.clone().cholesky()?.l();
        let mut theta = vec![0.0; n_params(m)];
        for i in 0..m {
            for j in 0..=i {
                theta[theta_index(i, j)] = if i == j { l[(i, i)].ln() } else { l[(i, j)] };
            }
        }
        Some(CovarianceParam { m, theta })
    }

    /// Standard deviations and correlation for m = 2, or the single sd for m = 1.
    pub fn sd_corr(&self) -> (Vec<f64>, Option<f64>) {
        let s = self.sigma();
        let sd: Vec<f64> = (0..self.m).map(|i| s[(i, i)].sqrt()).collect();
        let rho = (self.m >= 2).then(|| s[(1, 0)] / (sd[0] * sd[1]));
        (sd, rho)
    }

    pub fn lambda(&self) -> DMatrix<f64> {
        let m = self.m;
        DMatrix::from_fn(m, m, |i, j| {
            if j > i {
                0.0
            } else if i == j {
                self.theta[theta_index(i, i)].exp()
            } else {
                self.theta[theta_index(i, j)]
            }
        })
    }

    pub fn sigma(&self) -> DMatrix<f64> {
        let l = self.lambda();
        &l * l.transpose()
    }

    pub fn log_det_sigma(&self) -> f64 {
        (0..self.m).map(|i| 2.0 * self.theta[theta_index(i, i)]).sum()
    }

    pub fn sigma_inv(&self) -> DMatrix<f64> {
        let l = self.lambda();
        let li = l
            .solve_lower_triangular(&DMatrix::identity(self.m, self.m))
            .expect("diagonal of Λ is positive");
        li.transpose() * li
    }

    /// ∂Λ/∂θ_k.
    pub fn dlambda(&self, k: usize) -> DMatrix<f64> {
        let m = self.m;
        let mut d = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                if theta_index(i, j) == k {
                    d[(i, j)] = if i == j { self.theta[k].exp() } else { 1.0 };
                }
            }
        }
        d
    }

    /// Whether θ index `k` is a log-diagonal entry.
    pub fn is_diagonal(k: usize) -> bool {
        (0..).map(|i| theta_index(i, i)).take_while(|&p| p <= k).any(|p| p == k)
    }
}
