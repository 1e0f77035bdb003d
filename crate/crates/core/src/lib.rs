//! Marginal additive models.
//!
//! A penalized additive mixed model is fit on the link scale, the random
//! effects are integrated out of its mean by Gauss-Hermite quadrature, and
//! the resulting population-averaged curve is projected back onto the
//! additive basis. Pointwise intervals combine a delta-method variance from
//! the conditional posterior with a correction for the estimated variance
//! components.

pub mod basis;
pub mod cli;
pub mod data;
pub mod error;
pub mod family;
pub mod glmm;
pub mod mam;
pub mod marginal;
pub mod sim;
pub mod sparse;
pub mod summary;

pub use error::{MamError, Result};
