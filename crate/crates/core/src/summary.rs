//! Self-contained fit artifact: everything needed to evaluate the marginal
//! and conditional curves on a new grid without the training data.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{ModelConfig, SCHEMA_VERSION};
use crate::error::{MamError, Result};
use crate::glmm::{ConditionalFit, CovarianceParam, Diagnostics, ModelStructure};
use crate::mam::{
    confidence_bands, conditional_coef_factor, evaluate_rows, term_curve, Curve, MamFit, VarianceFactor,
    DEFAULT_BATCH,
};
use crate::marginal::link::marginalize_eta;
use crate::marginal::ghq_rule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSummary {
    pub alpha: Vec<f64>,
    pub psi_names: Vec<String>,
    pub psi: Vec<f64>,
    pub tau: Vec<f64>,
    pub theta: Vec<f64>,
    pub re_sd: Vec<f64>,
    pub re_corr: Option<f64>,
    pub scale: Option<f64>,
    pub laml: f64,
    pub edf: Vec<f64>,
    pub n_clusters: usize,
    pub n_obs: usize,
    /// Whitened posterior rows of α̂^C.
    pub coef_factor: VarianceFactor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSummary {
    pub alpha: Vec<f64>,
    pub conditional_factor: VarianceFactor,
    pub correction_factor: Option<VarianceFactor>,
    pub covariance_conditional: DMatrix<f64>,
    pub covariance_correction: DMatrix<f64>,
    pub gram_condition: f64,
    pub clamped: usize,
    pub level: f64,
    /// Mean of (V̂f)_ii and (V̂*)_ii over the training rows.
    pub mean_var_conditional: f64,
    pub mean_var_correction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub schema_version: u32,
    /// Seconds since the Unix epoch; the only field that changes between reruns.
    pub created_unix: u64,
    pub config: Option<ModelConfig>,
    pub term_names: Vec<String>,
    pub coefficient_names: Vec<String>,
    pub structure: ModelStructure,
    pub conditional: ConditionalSummary,
    pub marginal: MarginalSummary,
    pub diagnostics: Diagnostics,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl FitSummary {
    pub fn new(fit: &ConditionalFit, mam: &MamFit, config: Option<ModelConfig>, created_unix: u64) -> Self {
        let st = &fit.structure;
        let (re_sd, re_corr) = fit.cov().sd_corr();
        let q = mam.alpha.len();
        let mut coefficient_names = vec!["intercept".to_string()];
        for (t, name) in st.term_names().iter().enumerate() {
            let (_, c) = st.term_block(t);
            if c.len == 1 {
                coefficient_names.push(name.clone());
            } else {
                coefficient_names.extend((1..=c.len).map(|k| format!("{name}.{k}")));
            }
        }
        FitSummary {
            schema_version: SCHEMA_VERSION,
            created_unix,
            config,
            term_names: st.term_names(),
            coefficient_names,
            structure: st.clone(),
            conditional: ConditionalSummary {
                alpha: fit.alpha().to_vec(),
                psi_names: fit.layout.names(st),
                psi: fit.psi.clone(),
                tau: fit.tau(),
                theta: fit.cov().theta.clone(),
                re_sd,
                re_corr,
                scale: fit.layout.has_scale.then_some(fit.hyper.scale),
                laml: fit.laml,
                edf: fit.edf.clone(),
                n_clusters: fit.design.n_clusters(),
                n_obs: fit.design.n,
                coef_factor: conditional_coef_factor(fit),
            },
            marginal: MarginalSummary {
                alpha: mam.alpha.clone(),
                covariance_conditional: mam.conditional.covariance(),
                covariance_correction: mam
                    .correction
                    .as_ref()
                    .map(|c| c.covariance())
                    .unwrap_or_else(|| DMatrix::zeros(q, q)),
                conditional_factor: mam.conditional.clone(),
                correction_factor: mam.correction.clone(),
                gram_condition: mam.projection.gram_condition,
                clamped: mam.clamped,
                level: mam.level,
                mean_var_conditional: mean(&mam.var_conditional),
                mean_var_correction: mean(&mam.var_correction),
            },
            diagnostics: fit.diagnostics.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: FitSummary = serde_json::from_str(text)?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(MamError::Schema(format!(
                "fit artifact has schema_version {}, expected {SCHEMA_VERSION}",
                s.schema_version
            )));
        }
        let d = s.structure.d();
        if s.conditional.alpha.len() != d || s.marginal.alpha.len() != d {
            return Err(MamError::Schema("coefficient lengths do not match the stored basis".into()));
        }
        Ok(s)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| MamError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_json(&text)
    }

    pub fn covariance(&self) -> CovarianceParam {
        CovarianceParam::new(self.structure.m(), self.conditional.theta.clone())
    }

    fn marginal_factors(&self) -> Vec<&VarianceFactor> {
        let mut f = vec![&self.marginal.conditional_factor];
        if let Some(c) = &self.marginal.correction_factor {
            f.push(c);
        }
        f
    }

    /// Marginal term curves on the given per-term grids.
    pub fn marginal_curves(&self, grids: &[Vec<f64>]) -> Vec<Curve> {
        let factors = self.marginal_factors();
        grids
            .iter()
            .enumerate()
            .map(|(t, g)| term_curve(&self.structure, t, g, &self.marginal.alpha, &factors, self.marginal.level))
            .collect()
    }

    /// Conditional term curves (random effects at zero) with posterior bands.
    pub fn conditional_curves(&self, grids: &[Vec<f64>]) -> Vec<Curve> {
        grids
            .iter()
            .enumerate()
            .map(|(t, g)| {
                term_curve(
                    &self.structure,
                    t,
                    g,
                    &self.conditional.alpha,
                    &[&self.conditional.coef_factor],
                    self.marginal.level,
                )
            })
            .collect()
    }

    /// Pseudo-outcomes and the projected marginal predictor with bands at
    /// arbitrary covariate rows.
    pub fn marginalize(&self, rows: &[Vec<f64>]) -> Result<GridPrediction> {
        let st = &self.structure;
        let rule = ghq_rule(st.m(), st.ghq_k)?;
        let lambda = self.covariance().lambda();
        let d = st.d();
        let mut b = DMatrix::zeros(rows.len(), d);
        let mut lambda_hat = Vec::with_capacity(rows.len());
        for (i, x) in rows.iter().enumerate() {
            if x.len() != st.p {
                return Err(MamError::InvalidInput(format!(
                    "grid row {i} has {} covariates, expected {}",
                    x.len(),
                    st.p
                )));
            }
            let row = st.design_row(x);
            let eta: f64 = row.iter().zip(&self.conditional.alpha).map(|(a, c)| a * c).sum();
            let z = st.re_structure.design_row(x);
            lambda_hat.push(marginalize_eta(st.link, eta, &z, &lambda, &rule).0);
            b.row_mut(i).copy_from_slice(&row);
        }
        let (estimate, var_conditional) =
            evaluate_rows(&b, &self.marginal.alpha, &[&self.marginal.conditional_factor], DEFAULT_BATCH);
        let var_correction = match &self.marginal.correction_factor {
            Some(f) => f.pointwise(&b, DEFAULT_BATCH),
            None => vec![0.0; rows.len()],
        };
        let bands = confidence_bands(&estimate, &var_conditional, &var_correction, self.marginal.level);
        Ok(GridPrediction {
            lambda_hat,
            estimate,
            var_conditional,
            var_correction,
            lower: bands.lower,
            upper: bands.upper,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPrediction {
    pub lambda_hat: Vec<f64>,
    /// B^M(x) α̂^M.
    pub estimate: Vec<f64>,
    pub var_conditional: Vec<f64>,
    pub var_correction: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Writes curves as CSV with columns schema_version, term, x, estimate, se,
/// lower, upper.
pub fn write_curves<W: std::io::Write>(w: W, curves: &[Curve]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["schema_version", "term", "x", "estimate", "se", "lower", "upper"])?;
    let version = SCHEMA_VERSION.to_string();
    for c in curves {
        for i in 0..c.x.len() {
            wr.write_record([
                version.clone(),
                c.term.clone(),
                format!("{:?}", c.x[i]),
                format!("{:?}", c.estimate[i]),
                format!("{:?}", c.se[i]),
                format!("{:?}", c.lower[i]),
                format!("{:?}", c.upper[i]),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}
