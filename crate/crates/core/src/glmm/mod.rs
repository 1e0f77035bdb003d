//! Penalized generalized additive mixed model fit by Laplace-approximate REML.

pub mod covariance;
pub mod design;
pub mod fit;
pub mod inner;
pub mod laml;
pub mod objective;
pub mod outer;

pub use covariance::CovarianceParam;
pub use design::{ModelDesign, ModelStructure, TermColumns};
pub use fit::{fit_conditional, fit_conditional_with, ConditionalFit, Diagnostics, FitOptions};
pub use objective::{Hyper, Objective, PsiLayout};
