//! Response families, link functions and the standard normal helpers they need.

use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Bernoulli,
    Gaussian,
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logit,
    Probit,
    Identity,
    Log,
}

impl Family {
    pub fn supports(self, link: Link) -> bool {
        matches!(
            (self, link),
            (Family::Bernoulli, Link::Logit)
                | (Family::Bernoulli, Link::Probit)
                | (Family::Gaussian, Link::Identity)
                | (Family::Poisson, Link::Log)
        )
    }

    pub fn in_support(self, y: f64) -> bool {
        match self {
            Family::Bernoulli => y == 0.0 || y == 1.0,
            Family::Gaussian => y.is_finite(),
            Family::Poisson => y.is_finite() && y >= 0.0 && y.fract() == 0.0,
        }
    }

    /// Whether the family carries a free dispersion (scale) parameter.
    pub fn has_scale(self) -> bool {
        matches!(self, Family::Gaussian)
    }

    /// Negative log-likelihood of one observation and its first two
    /// derivatives with respect to the linear predictor.
    ///
    /// `scale` is the residual standard deviation and only used by the
    /// Gaussian family.
    pub fn nll_derivs(self, link: Link, y: f64, eta: f64, scale: f64) -> (f64, f64, f64) {
        match (self, link) {
            (Family::Bernoulli, Link::Logit) => {
                // log(1 + e^eta) - y*eta, evaluated without overflow
                let softplus = if eta > 0.0 {
                    eta + (-eta).exp().ln_1p()
                } else {
                    eta.exp().ln_1p()
                };
                let p = expit(eta);
                (softplus - y * eta, p - y, p * (1.0 - p))
            }
            (Family::Bernoulli, Link::Probit) => {
                // For y = 1 the likelihood is Phi(eta); for y = 0 it is Phi(-eta).
                let s = if y == 1.0 { 1.0 } else { -1.0 };
                let t = s * eta;
                let r = inv_mills(t);
                (-norm_logcdf(t), -s * r, r * (t + r))
            }
            (Family::Gaussian, Link::Identity) => {
                let var = scale * scale;
                let res = y - eta;
                (
                    0.5 * res * res / var + scale.ln() + LN_SQRT_2PI,
                    -res / var,
                    1.0 / var,
                )
            }
            (Family::Poisson, Link::Log) => {
                let mu = eta.exp();
                (mu - y * eta + libm::lgamma(y + 1.0), mu - y, mu)
            }
            _ => (f64::NAN, f64::NAN, f64::NAN),
        }
    }
}

impl Link {
    /// g(mu)
    pub fn link(self, mu: f64) -> f64 {
        match self {
            Link::Logit => (mu / (1.0 - mu)).ln(),
            Link::Probit => norm_quantile(mu),
            Link::Identity => mu,
            Link::Log => mu.ln(),
        }
    }

    /// g^{-1}(eta)
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Logit => expit(eta),
            Link::Probit => norm_cdf(eta),
            Link::Identity => eta,
            Link::Log => eta.exp(),
        }
    }

    /// d g^{-1} / d eta
    pub fn inverse_deriv(self, eta: f64) -> f64 {
        match self {
            Link::Logit => {
                let p = expit(eta);
                p * (1.0 - p)
            }
            Link::Probit => norm_pdf(eta),
            Link::Identity => 1.0,
            Link::Log => eta.exp(),
        }
    }

    /// g'(mu)
    pub fn link_deriv(self, mu: f64) -> f64 {
        match self {
            Link::Logit => 1.0 / (mu * (1.0 - mu)),
            Link::Probit => 1.0 / norm_pdf(norm_quantile(mu)),
            Link::Identity => 1.0,
            Link::Log => 1.0 / mu,
        }
    }

    /// Open interval of valid mean values, if bounded.
    pub fn mean_bounds(self) -> (f64, f64) {
        match self {
            Link::Logit | Link::Probit => (0.0, 1.0),
            Link::Identity => (f64::NEG_INFINITY, f64::INFINITY),
            Link::Log => (0.0, f64::INFINITY),
        }
    }
}

pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn norm_logcdf(x: f64) -> f64 {
    if x > -30.0 {
        norm_cdf(x).ln()
    } else {
        // log Phi(x) = log phi(x) - log(-x) + log(1 - 1/x^2 + 3/x^4 - ...)
        let x2 = x * x;
        -0.5 * x2 - LN_SQRT_2PI - (-x).ln() + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    }
}

/// phi(x) / Phi(x), stable for large negative x.
pub fn inv_mills(x: f64) -> f64 {
    if x > -30.0 {
        norm_pdf(x) / norm_cdf(x)
    } else {
        // continued-fraction tail: Phi(x) ~ phi(x) / (-x) * (1 - 1/x^2 + 3/x^4)
        let x2 = x * x;
        -x / (1.0 - 1.0 / x2 + 3.0 / (x2 * x2))
    }
}

/// Inverse standard normal CDF. Rational initial guess refined by Halley steps.
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let plow = 0.02425;
    let mut x = if p < plow {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - plow {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    for _ in 0..2 {
        // residual computed on whichever tail keeps precision
        let e = if x < 0.0 {
            norm_cdf(x) - p
        } else {
            (1.0 - p) - 0.5 * libm::erfc(x * FRAC_1_SQRT_2)
        };
        let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

/// Two-sided standard normal critical value for a (1 - alpha) interval.
pub fn normal_critical(level: f64) -> f64 {
    if (level - 0.95).abs() < 1e-15 {
        return 1.959_963_984_540_054;
    }
    -norm_quantile(0.5 * (1.0 - level))
}
