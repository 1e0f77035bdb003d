//! Symmetric sparse matrices and an up-looking sparse Cholesky factorization
//! with a caller-supplied fill-reducing permutation.

use crate::error::{MamError, Result};

/// Lower triangle of a symmetric matrix in compressed sparse column form.
/// Row indices within a column are strictly increasing and start at or below
/// the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SymCsc {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SymCsc {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Builds from (row, col, value) triplets of the lower triangle; duplicate
    /// entries are summed in input order.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut count = vec![0usize; n + 1];
        for &(i, j, _) in triplets {
            debug_assert!(i >= j && i < n);
            count[j + 1] += 1;
        }
        for j in 0..n {
            count[j + 1] += count[j];
        }
        let mut next = count.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(i, j, v) in triplets {
            rows[next[j]] = i;
            vals[next[j]] = v;
            next[j] += 1;
        }
        // sort each column by row and merge duplicates
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(rows.len());
        let mut values = Vec::with_capacity(rows.len());
        for j in 0..n {
            let mut entries: Vec<(usize, f64)> = (count[j]..count[j + 1])
                .map(|p| (rows[p], vals[p]))
                .collect();
            entries.sort_by_key(|e| e.0);
            for (i, v) in entries {
                if row_idx.len() > col_ptr[j] && *row_idx.last().unwrap() == i {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(i);
                    values.push(v);
                }
            }
            col_ptr[j + 1] = row_idx.len();
        }
        SymCsc {
            n,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// y = A x using both triangles.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                let i = self.row_idx[p];
                let v = self.values[p];
                y[i] += v * x[j];
                if i != j {
                    y[j] += v * x[i];
                }
            }
        }
        y
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut a = nalgebra::DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                let i = self.row_idx[p];
                a[(i, j)] = self.values[p];
                a[(j, i)] = self.values[p];
            }
        }
        a
    }

    /// Adds `shift` to every diagonal entry; the diagonal must be stored.
    pub fn shift_diagonal(&mut self, shift: f64) {
        for j in 0..self.n {
            let p = self.col_ptr[j];
            debug_assert_eq!(self.row_idx[p], j);
            self.values[p] += shift;
        }
    }
}

/// Factor P A Pᵀ = L Lᵀ. `perm[k]` is the original index placed at position k.
#[derive(Debug, Clone)]
pub struct SparseCholesky {
    pub n: usize,
    pub perm: Vec<usize>,
    pinv: Vec<usize>,
    parent: Vec<Option<usize>>,
    l_ptr: Vec<usize>,
    l_idx: Vec<usize>,
    l_val: Vec<f64>,
}

/// Upper triangle of P A Pᵀ in CSC form.
fn permuted_upper(a: &SymCsc, pinv: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let n = a.n;
    let mut count = vec![0usize; n + 1];
    for j in 0..n {
        for p in a.col_ptr[j]..a.col_ptr[j + 1] {
            let (i2, j2) = (pinv[a.row_idx[p]], pinv[j]);
            count[i2.max(j2) + 1] += 1;
        }
    }
    for k in 0..n {
        count[k + 1] += count[k];
    }
    let mut next = count.clone();
    let mut ci = vec![0usize; a.nnz()];
    let mut cx = vec![0.0; a.nnz()];
    for j in 0..n {
        for p in a.col_ptr[j]..a.col_ptr[j + 1] {
            let (i2, j2) = (pinv[a.row_idx[p]], pinv[j]);
            let col = i2.max(j2);
            ci[next[col]] = i2.min(j2);
            cx[next[col]] = a.values[p];
            next[col] += 1;
        }
    }
    // sorted rows make the factor a function of P A Pᵀ alone
    for k in 0..n {
        let (lo, hi) = (count[k], count[k + 1]);
        let mut pairs: Vec<(usize, f64)> = ci[lo..hi].iter().copied().zip(cx[lo..hi].iter().copied()).collect();
        pairs.sort_unstable_by_key(|p| p.0);
        for (t, (i, v)) in pairs.into_iter().enumerate() {
            ci[lo + t] = i;
            cx[lo + t] = v;
        }
    }
    (count, ci, cx)
}

fn etree(n: usize, cp: &[usize], ci: &[usize]) -> Vec<Option<usize>> {
    let mut parent = vec![None; n];
    let mut ancestor: Vec<Option<usize>> = vec![None; n];
    for k in 0..n {
        for &i0 in &ci[cp[k]..cp[k + 1]] {
            let mut i = i0;
            while i < k {
                let next = ancestor[i];
                ancestor[i] = Some(k);
                match next {
                    None => {
                        parent[i] = Some(k);
                        break;
                    }
                    Some(nx) => i = nx,
                }
            }
        }
    }
    parent
}

/// Nonzero pattern of row k of L (excluding the diagonal), in topological
/// order, written to the tail of `stack`; returns the start index.
fn ereach(
    k: usize,
    cp: &[usize],
    ci: &[usize],
    parent: &[Option<usize>],
    mark: &mut [usize],
    stack: &mut [usize],
) -> usize {
    let n = parent.len();
    let mut top = n;
    mark[k] = k + 1;
    for &i0 in &ci[cp[k]..cp[k + 1]] {
        let mut i = i0;
        if i > k {
            continue;
        }
        let mut len = 0;
        while mark[i] != k + 1 {
            stack[len] = i;
            len += 1;
            mark[i] = k + 1;
            match parent[i] {
                Some(p) => i = p,
                None => break,
            }
        }
        while len > 0 {
            len -= 1;
            top -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

impl SparseCholesky {
    /// Factorizes `a` under the permutation `perm` (None = natural order).
    pub fn factor(a: &SymCsc, perm: Option<Vec<usize>>) -> Result<Self> {
        let n = a.n;
        let perm = perm.unwrap_or_else(|| (0..n).collect());
        let mut pinv = vec![0usize; n];
        for (k, &p) in perm.iter().enumerate() {
            pinv[p] = k;
        }
        let (cp, ci, cx) = permuted_upper(a, &pinv);
        let parent = etree(n, &cp, &ci);

        // column counts of L from the row patterns
        let mut mark = vec![0usize; n];
        let mut stack = vec![0usize; n];
        let mut counts = vec![1usize; n];
        for k in 0..n {
            let top = ereach(k, &cp, &ci, &parent, &mut mark, &mut stack);
            for &i in &stack[top..n] {
                counts[i] += 1;
            }
        }
        let mut l_ptr = vec![0usize; n + 1];
        for k in 0..n {
            l_ptr[k + 1] = l_ptr[k] + counts[k];
        }
        let nnz = l_ptr[n];
        let mut l_idx = vec![0usize; nnz];
        let mut l_val = vec![0.0; nnz];
        let mut fill: Vec<usize> = l_ptr[..n].to_vec();
        let mut x = vec![0.0; n];
        mark.iter_mut().for_each(|m| *m = 0);

        for k in 0..n {
            let top = ereach(k, &cp, &ci, &parent, &mut mark, &mut stack);
            for p in cp[k]..cp[k + 1] {
                if ci[p] <= k {
                    x[ci[p]] += cx[p];
                }
            }
            let mut diag = x[k];
            x[k] = 0.0;
            for &i in &stack[top..n] {
                let lki = x[i] / l_val[l_ptr[i]];
                x[i] = 0.0;
                for p in l_ptr[i] + 1..fill[i] {
                    x[l_idx[p]] -= l_val[p] * lki;
                }
                diag -= lki * lki;
                l_idx[fill[i]] = k;
                l_val[fill[i]] = lki;
                fill[i] += 1;
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(MamError::NotPositiveDefinite(format!(
                    "pivot {k} of {n} is {diag:e}"
                )));
            }
            l_idx[fill[k]] = k;
            l_val[fill[k]] = diag.sqrt();
            fill[k] += 1;
        }
        Ok(SparseCholesky {
            n,
            perm,
            pinv,
            parent,
            l_ptr,
            l_idx,
            l_val,
        })
    }

    pub fn nnz(&self) -> usize {
        self.l_val.len()
    }

    pub fn elimination_tree(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|k| 2.0 * self.l_val[self.l_ptr[k]].ln()).sum()
    }

    /// In place x <- L⁻¹ x (permuted coordinates); zero entries are skipped.
    pub fn lower_solve_in_place(&self, x: &mut [f64]) {
        for j in 0..self.n {
            if x[j] == 0.0 {
                continue;
            }
            x[j] /= self.l_val[self.l_ptr[j]];
            let xj = x[j];
            for p in self.l_ptr[j] + 1..self.l_ptr[j + 1] {
                x[self.l_idx[p]] -= self.l_val[p] * xj;
            }
        }
    }

    /// In place x <- L⁻ᵀ x (permuted coordinates).
    pub fn upper_solve_in_place(&self, x: &mut [f64]) {
        for j in (0..self.n).rev() {
            let mut s = x[j];
            for p in self.l_ptr[j] + 1..self.l_ptr[j + 1] {
                s -= self.l_val[p] * x[self.l_idx[p]];
            }
            x[j] = s / self.l_val[self.l_ptr[j]];
        }
    }

    /// Whitening map w = L⁻¹ P b (b in original coordinates).
    pub fn whiten(&self, b: &[f64]) -> Vec<f64> {
        let mut w: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        self.lower_solve_in_place(&mut w);
        w
    }

    /// Solves A x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut w = self.whiten(b);
        self.upper_solve_in_place(&mut w);
        let mut x = vec![0.0; self.n];
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = w[k];
        }
        x
    }

    /// Position of original index `i` in the permuted ordering.
    pub fn position(&self, i: usize) -> usize {
        self.pinv[i]
    }

    /// Reconstructs P A Pᵀ from the factor, as dense (testing aid).
    pub fn reconstruct_permuted(&self) -> nalgebra::DMatrix<f64> {
        let mut l = nalgebra::DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            for p in self.l_ptr[j]..self.l_ptr[j + 1] {
                l[(self.l_idx[p], j)] = self.l_val[p];
            }
        }
        &l * l.transpose()
    }
}
