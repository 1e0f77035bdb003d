//! Fixed-effect column layout and the assembled design of a conditional model.

use serde::{Deserialize, Serialize};

use crate::basis::{build_term, SmoothTerm};
use crate::data::{ClusteredDataset, ModelSpec, ReStructure};
use crate::error::{MamError, Result};
use crate::family::{Family, Link};

/// Everything needed to turn a covariate vector into a design row; contains
/// no data and is stored in fit artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStructure {
    pub family: Family,
    pub link: Link,
    pub ghq_k: usize,
    pub re_structure: ReStructure,
    pub covariate_names: Vec<String>,
    /// Number of covariates per row.
    pub p: usize,
    pub linear_terms: Vec<usize>,
    pub smooths: Vec<SmoothTerm>,
}

/// Covariate values with clusters sorted by id, so the basis does not depend
/// on input order.
fn canonical_covariate(dataset: &ClusteredDataset, j: usize) -> Vec<f64> {
    let mut clusters: Vec<&crate::data::Cluster> = dataset.clusters.iter().collect();
    clusters.sort_by(|a, b| a.id.cmp(&b.id));
    clusters.iter().flat_map(|c| c.rows.iter().map(move |r| r.x[j])).collect()
}

/// Column block of one term in the fixed-effect vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermColumns {
    pub start: usize,
    pub len: usize,
}

impl ModelStructure {
    pub fn build(spec: &ModelSpec, dataset: &ClusteredDataset) -> Result<Self> {
        let smooths = spec
            .smooth_terms
            .iter()
            .map(|t| {
                build_term(t, &canonical_covariate(dataset, t.covariate)).map_err(|e| match e {
                    MamError::Basis(msg) => MamError::Basis(format!(
                        "{}: {msg}",
                        name_of(&dataset.covariate_names, t.covariate)
                    )),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelStructure {
            family: spec.family,
            link: spec.link,
            ghq_k: spec.ghq_k,
            re_structure: spec.re_structure.clone(),
            covariate_names: dataset.covariate_names.clone(),
            p: dataset.p,
            linear_terms: spec.linear_terms.clone(),
            smooths,
        })
    }

    pub fn m(&self) -> usize {
        self.re_structure.dim()
    }

    /// Number of fixed-effect columns.
    pub fn d(&self) -> usize {
        1 + self.linear_terms.len() + self.smooths.iter().map(|s| s.n_cols()).sum::<usize>()
    }

    pub fn n_smooths(&self) -> usize {
        self.smooths.len()
    }

    pub fn linear_column(&self, k: usize) -> usize {
        1 + k
    }

    pub fn smooth_columns(&self, l: usize) -> TermColumns {
        let mut start = 1 + self.linear_terms.len();
        for s in &self.smooths[..l] {
            start += s.n_cols();
        }
        TermColumns {
            start,
            len: self.smooths[l].n_cols(),
        }
    }

    /// Penalized (range-space) columns of smooth `l`.
    pub fn penalized_columns(&self, l: usize) -> TermColumns {
        let c = self.smooth_columns(l);
        let null = self.smooths[l].null_dim();
        TermColumns {
            start: c.start + null,
            len: c.len - null,
        }
    }

    /// Human-readable name of each reportable term, in column order: linear
    /// terms then smooths.
    pub fn term_names(&self) -> Vec<String> {
        self.linear_terms
            .iter()
            .map(|&j| name_of(&self.covariate_names, j))
            .chain(
                self.smooths
                    .iter()
                    .map(|s| format!("s({})", name_of(&self.covariate_names, s.covariate))),
            )
            .collect()
    }

    /// Writes the fixed-effect row for covariate vector `x` into `out`.
    pub fn design_row_into(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        for (k, &j) in self.linear_terms.iter().enumerate() {
            out[1 + k] = x[j];
        }
        for (l, s) in self.smooths.iter().enumerate() {
            let c = self.smooth_columns(l);
            s.working_row_into(x[s.covariate], &mut out[c.start..c.start + c.len]);
        }
    }

    pub fn design_row(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d()];
        self.design_row_into(x, &mut out);
        out
    }

    /// Row containing only the columns of one term (others zero); used for
    /// per-term curves. `term` indexes `term_names`.
    pub fn term_row(&self, term: usize, value: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.d()];
        let nl = self.linear_terms.len();
        if term < nl {
            out[1 + term] = value;
        } else {
            let l = term - nl;
            let c = self.smooth_columns(l);
            self.smooths[l].working_row_into(value, &mut out[c.start..c.start + c.len]);
        }
        out
    }

    /// Covariate index and column block of reportable term `term`.
    pub fn term_block(&self, term: usize) -> (usize, TermColumns) {
        let nl = self.linear_terms.len();
        if term < nl {
            (
                self.linear_terms[term],
                TermColumns {
                    start: 1 + term,
                    len: 1,
                },
            )
        } else {
            let l = term - nl;
            (self.smooths[l].covariate, self.smooth_columns(l))
        }
    }

    /// Name of the term owning fixed-effect column `col`.
    pub fn column_owner(&self, col: usize) -> String {
        if col == 0 {
            return "intercept".into();
        }
        let names = self.term_names();
        for t in 0..names.len() {
            let (_, c) = self.term_block(t);
            if col >= c.start && col < c.start + c.len {
                return names[t].clone();
            }
        }
        format!("column {col}")
    }
}

fn name_of(names: &[String], j: usize) -> String {
    names.get(j).cloned().unwrap_or_else(|| format!("x{j}"))
}

/// Data-dependent design: fixed-effect rows, RE rows, responses and cluster
/// boundaries, all row-major in cluster order.
#[derive(Debug, Clone)]
pub struct ModelDesign {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
    /// Rows of cluster i are `cluster_ptr[i]..cluster_ptr[i+1]`.
    pub cluster_ptr: Vec<usize>,
    /// Cluster indices sorted by id. Every reduction over clusters runs in
    /// this order, so results do not depend on the order of the input file.
    pub order: Vec<usize>,
}

impl ModelDesign {
    pub fn new(structure: &ModelStructure, dataset: &ClusteredDataset) -> Self {
        let d = structure.d();
        let m = structure.m();
        let n = dataset.n_total;
        let mut x = vec![0.0; n * d];
        let mut z = Vec::with_capacity(n * m);
        let mut y = Vec::with_capacity(n);
        let mut cluster_ptr = vec![0];
        let mut r = 0;
        for c in &dataset.clusters {
            for row in &c.rows {
                structure.design_row_into(&row.x, &mut x[r * d..(r + 1) * d]);
                z.extend(structure.re_structure.design_row(&row.x));
                y.push(row.y);
                r += 1;
            }
            cluster_ptr.push(r);
        }
        let mut order: Vec<usize> = (0..dataset.n_clusters()).collect();
        order.sort_by(|&a, &b| dataset.clusters[a].id.cmp(&dataset.clusters[b].id));
        ModelDesign {
            n,
            d,
            m,
            x,
            z,
            y,
            cluster_ptr,
            order,
        }
    }

    /// Row indices with clusters visited in canonical order.
    pub fn canonical_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.order
            .iter()
            .flat_map(|&i| self.cluster_ptr[i]..self.cluster_ptr[i + 1])
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_ptr.len() - 1
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.x[r * self.d..(r + 1) * self.d]
    }

    pub fn z_row(&self, r: usize) -> &[f64] {
        &self.z[r * self.m..(r + 1) * self.m]
    }

    /// Length of the joint (α, u) vector.
    pub fn joint_dim(&self) -> usize {
        self.d + self.n_clusters() * self.m
    }

    /// Fill-reducing ordering: all random-effect blocks first (in canonical
    /// cluster order), fixed effects last. The factor of the joint Hessian
    /// then has no fill.
    pub fn arrow_permutation(&self) -> Vec<usize> {
        let (d, m) = (self.d, self.m);
        self.order
            .iter()
            .flat_map(|&i| d + i * m..d + (i + 1) * m)
            .chain(0..d)
            .collect()
    }

    /// Fixed-effect design as a dense n x d matrix.
    pub fn x_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.n, self.d, &self.x)
    }
}
