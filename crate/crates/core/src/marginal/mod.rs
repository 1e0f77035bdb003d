//! Integrating random effects out of the conditional mean.

pub mod ghq;
pub mod link;

pub use ghq::{ghq_rule, GhqRule};
pub use link::{jacobian_lambda, marginal_link, solve_delta, Grid, MarginalizedMeans};
