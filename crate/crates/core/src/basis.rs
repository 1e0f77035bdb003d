//! Cubic B-spline smooths with difference penalties, the sum-to-zero
//! constraint and the null/range-space reparameterization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::SmoothTermSpec;
use crate::error::{MamError, Result};

pub const DEGREE: usize = 3;
/// Eigenvalues below this fraction of the largest are treated as null space.
pub const NULL_SPACE_TOL: f64 = 1e-9;

/// Eigen-split of a penalty matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reparam {
    /// Null-space directions, one per column.
    pub u_f: DMatrix<f64>,
    /// Range-space directions, ordered by decreasing eigenvalue.
    pub u_r: DMatrix<f64>,
    pub d_plus: Vec<f64>,
}

impl Reparam {
    pub fn null_dim(&self) -> usize {
        self.u_f.ncols()
    }

    pub fn range_dim(&self) -> usize {
        self.u_r.ncols()
    }

    /// Splits a design block into its unpenalized and penalized parts.
    pub fn split_design(&self, b: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (b * &self.u_f, b * &self.u_r)
    }
}

/// Symmetric eigendecomposition of a PSD penalty, split into null and range
/// spaces. Eigenvectors are sign-normalized so the largest entry is positive.
pub fn eigen_reparameterize(s: &DMatrix<f64>) -> Result<Reparam> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(MamError::Basis("penalty matrix is not square".into()));
    }
    let scale = s.amax().max(1.0);
    let asym = (s - s.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(MamError::Basis(format!(
            "penalty matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    if n == 0 {
        return Ok(Reparam {
            u_f: DMatrix::zeros(0, 0),
            u_r: DMatrix::zeros(0, 0),
            d_plus: vec![],
        });
    }
    let eig = SymmetricEigen::new(s.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lmax = eig.eigenvalues[order[0]];
    let cut = NULL_SPACE_TOL * lmax;

    let mut range = Vec::new();
    let mut null = Vec::new();
    for &k in &order {
        if lmax > 0.0 && eig.eigenvalues[k] > cut {
            range.push(k);
        } else {
            null.push(k);
        }
    }
    let column = |k: usize| {
        let mut v: DVector<f64> = eig.eigenvectors.column(k).into_owned();
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        v
    };
    let stack = |idx: &[usize]| {
        let mut m = DMatrix::zeros(n, idx.len());
        for (j, &k) in idx.iter().enumerate() {
            m.set_column(j, &column(k));
        }
        m
    };
    Ok(Reparam {
        u_f: stack(&null),
        u_r: stack(&range),
        d_plus: range.iter().map(|&k| eig.eigenvalues[k]).collect(),
    })
}

/// Difference matrix of the given order, (d - order) x d.
pub fn difference_matrix(d: usize, order: usize) -> DMatrix<f64> {
    let mut dm = DMatrix::<f64>::identity(d, d);
    for _ in 0..order {
        let r = dm.nrows();
        dm = DMatrix::from_fn(r - 1, d, |i, j| dm[(i + 1, j)] - dm[(i, j)]);
    }
    dm
}

pub fn difference_penalty(d: usize, order: usize) -> DMatrix<f64> {
    let dm = difference_matrix(d, order);
    dm.transpose() * dm
}

/// Clamped cubic knot vector with `d - 4` equally spaced interior knots.
pub fn clamped_knots(lo: f64, hi: f64, d: usize) -> Vec<f64> {
    let intervals = d - DEGREE;
    let mut t = vec![lo; DEGREE + 1];
    for k in 1..intervals {
        t.push(lo + (hi - lo) * k as f64 / intervals as f64);
    }
    t.extend(std::iter::repeat_n(hi, DEGREE + 1));
    t
}

fn find_span(t: &[f64], d: usize, x: f64) -> usize {
    // last non-degenerate span for the right end
    if x >= t[d] {
        return d - 1;
    }
    let mut lo = DEGREE;
    let mut hi = d;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if x < t[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// Nonzero B-spline values of degree `p` on `span`: functions span-p..=span.
fn basis_funs(t: &[f64], span: usize, x: f64, p: usize) -> Vec<f64> {
    let mut n = vec![0.0; p + 1];
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    n[0] = 1.0;
    for j in 1..=p {
        left[j] = x - t[span + 1 - j];
        right[j] = t[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    n
}

/// Values and first derivatives of all `d` cubic B-splines at `x`.
fn raw_row(t: &[f64], d: usize, x: f64) -> (Vec<f64>, Vec<f64>) {
    let span = find_span(t, d, x);
    let vals = basis_funs(t, span, x, DEGREE);
    let lower = basis_funs(t, span, x, DEGREE - 1);
    let mut row = vec![0.0; d];
    let mut drow = vec![0.0; d];
    let p = DEGREE as f64;
    for j in 0..=DEGREE {
        let i = span - DEGREE + j;
        row[i] = vals[j];
        // lower-degree functions are indexed span-p+1..=span
        let a = if j > 0 { lower[j - 1] } else { 0.0 };
        let b = if j < DEGREE { lower[j] } else { 0.0 };
        let da = t[i + DEGREE] - t[i];
        let db = t[i + DEGREE + 1] - t[i + 1];
        let mut v = 0.0;
        if da > 0.0 {
            v += a / da;
        }
        if db > 0.0 {
            v -= b / db;
        }
        drow[i] = p * v;
    }
    (row, drow)
}

/// One smooth term: knots, penalty, centering constraint and the working
/// coordinate transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothTerm {
    pub covariate: usize,
    pub degree: usize,
    pub basis_dim: usize,
    pub penalty_order: usize,
    pub knots: Vec<f64>,
    pub penalty: DMatrix<f64>,
    /// Column sums of the unconstrained basis over the training data.
    pub constraint: Vec<f64>,
    /// Householder null-space map of the constraint, d x (d - 1).
    pub constraint_map: DMatrix<f64>,
    /// Reparameterization of the constrained penalty.
    pub reparam: Reparam,
    /// Maps working coefficients (null-space first, then scaled range space)
    /// to raw B-spline coefficients, d x (d - 1).
    pub transform: DMatrix<f64>,
}

impl SmoothTerm {
    pub fn lower(&self) -> f64 {
        self.knots[0]
    }

    pub fn upper(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    /// Number of working (constrained) columns.
    pub fn n_cols(&self) -> usize {
        self.transform.ncols()
    }

    pub fn null_dim(&self) -> usize {
        self.reparam.null_dim()
    }

    pub fn range_dim(&self) -> usize {
        self.reparam.range_dim()
    }

    /// Unconstrained B-spline row at `x`, extrapolated linearly outside the
    /// knot range.
    pub fn raw_row(&self, x: f64) -> Vec<f64> {
        let d = self.basis_dim;
        let (lo, hi) = (self.lower(), self.upper());
        if x < lo || x > hi {
            let edge = if x < lo { lo } else { hi };
            let (row, drow) = raw_row(&self.knots, d, edge);
            return row
                .iter()
                .zip(&drow)
                .map(|(b, db)| b + (x - edge) * db)
                .collect();
        }
        raw_row(&self.knots, d, x).0
    }

    /// Unconstrained basis matrix, n x d.
    pub fn raw_basis(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.basis_dim;
        let mut b = DMatrix::zeros(x.len(), d);
        for (i, &xi) in x.iter().enumerate() {
            for (j, v) in self.raw_row(xi).into_iter().enumerate() {
                b[(i, j)] = v;
            }
        }
        b
    }

    /// Working-coordinate row at `x`, written into `out` (length `n_cols`).
    pub fn working_row_into(&self, x: f64, out: &mut [f64]) {
        let raw = self.raw_row(x);
        let k = self.n_cols();
        for (j, o) in out.iter_mut().enumerate().take(k) {
            let mut s = 0.0;
            for (i, r) in raw.iter().enumerate() {
                if *r != 0.0 {
                    s += r * self.transform[(i, j)];
                }
            }
            *o = s;
        }
    }
}

/// Builds a smooth term from the training values of its covariate.
pub fn build_term(spec: &SmoothTermSpec, x: &[f64]) -> Result<SmoothTerm> {
    let d = spec.basis_dim;
    if d < DEGREE + 1 || d < spec.penalty_order + 2 {
        return Err(MamError::Basis(format!(
            "basis dimension {d} too small for a cubic spline with penalty order {}",
            spec.penalty_order
        )));
    }
    let mut distinct: Vec<f64> = x.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.iter().any(|v| !v.is_finite()) {
        return Err(MamError::Basis(format!(
            "covariate {} has non-finite values",
            spec.covariate
        )));
    }
    if distinct.len() < d {
        return Err(MamError::Basis(format!(
            "covariate {} has {} distinct values, fewer than basis dimension {d}",
            spec.covariate,
            distinct.len()
        )));
    }
    let knots = clamped_knots(distinct[0], distinct[distinct.len() - 1], d);
    let penalty = difference_penalty(d, spec.penalty_order);

    let mut constraint = vec![0.0; d];
    for &xi in x {
        for (c, v) in constraint.iter_mut().zip(raw_row(&knots, d, xi).0) {
            *c += v;
        }
    }
    let constraint_map = householder_null_map(&constraint);
    let constrained = constraint_map.transpose() * &penalty * &constraint_map;
    let constrained = 0.5 * (&constrained + constrained.transpose());
    let reparam = eigen_reparameterize(&constrained)?;

    let r = reparam.range_dim();
    let scaled = DMatrix::from_fn(d - 1, r, |i, j| {
        reparam.u_r[(i, j)] / reparam.d_plus[j].sqrt()
    });
    let mut working = DMatrix::zeros(d - 1, d - 1);
    working
        .columns_mut(0, reparam.null_dim())
        .copy_from(&reparam.u_f);
    working.columns_mut(reparam.null_dim(), r).copy_from(&scaled);
    let transform = &constraint_map * working;

    Ok(SmoothTerm {
        covariate: spec.covariate,
        degree: DEGREE,
        basis_dim: d,
        penalty_order: spec.penalty_order,
        knots,
        penalty,
        constraint,
        constraint_map,
        reparam,
        transform,
    })
}

/// Orthonormal basis (d x (d-1)) of the complement of `c`, from the
/// Householder reflection that maps `c` onto the first axis.
fn householder_null_map(c: &[f64]) -> DMatrix<f64> {
    let d = c.len();
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut v = DVector::from_column_slice(c);
    let sign = if c[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += sign * norm;
    let vv = v.dot(&v);
    let mut h = DMatrix::<f64>::identity(d, d);
    if vv > 0.0 {
        h -= (2.0 / vv) * &v * v.transpose();
    }
    h.columns(1, d - 1).into_owned()
}

/// Constrained basis B·Z (n x (d-1)), the columns before reparameterization.
pub fn evaluate_basis(term: &SmoothTerm, x_new: &[f64]) -> DMatrix<f64> {
    term.raw_basis(x_new) * &term.constraint_map
}

/// Working design block (n x (d-1)) used by the fitters.
pub fn working_basis(term: &SmoothTerm, x_new: &[f64]) -> DMatrix<f64> {
    let k = term.n_cols();
    let mut out = DMatrix::zeros(x_new.len(), k);
    let mut row = vec![0.0; k];
    for (i, &x) in x_new.iter().enumerate() {
        term.working_row_into(x, &mut row);
        for j in 0..k {
            out[(i, j)] = row[j];
        }
    }
    out
}

/// CSV dump of the unconstrained basis on `points` equally spaced values.
pub fn dump_basis<W: std::io::Write>(term: &SmoothTerm, points: usize, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["x".to_string()];
    header.extend((1..=term.basis_dim).map(|j| format!("b{j}")));
    out.write_record(&header)?;
    let (lo, hi) = (term.lower(), term.upper());
    for k in 0..points {
        let x = if points == 1 {
            lo
        } else {
            lo + (hi - lo) * k as f64 / (points - 1) as f64
        };
        let mut rec = vec![format!("{x:?}")];
        rec.extend(term.raw_row(x).iter().map(|v| format!("{v:?}")));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
