//! Gauss–Hermite rules for standard normal expectations.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{MamError, Result};

/// Product Gauss–Hermite rule for E[h(Z)], Z ~ N(0, I_m). Weights carry the
/// normal density and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GhqRule {
    pub m: usize,
    pub k: usize,
    /// k^m nodes, row-major (node q occupies `nodes[q*m..(q+1)*m]`).
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GhqRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, q: usize) -> &[f64] {
        &self.nodes[q * self.m..(q + 1) * self.m]
    }
}

/// One-dimensional rule (probabilists' convention). Initial nodes come from
/// the eigenvalues of the Jacobi matrix and are polished by Newton steps on
/// the orthonormal Hermite recurrence; weights are 1 / (k p_{k-1}(x)^2).
pub fn hermite_1d(k: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(k >= 1);
    if k == 1 {
        return (vec![0.0], vec![1.0]);
    }
    let jac = DMatrix::from_fn(k, k, |i, j| {
        if i + 1 == j {
            (j as f64).sqrt()
        } else if j + 1 == i {
            (i as f64).sqrt()
        } else {
            0.0
        }
    });
    let mut nodes: Vec<f64> = SymmetricEigen::new(jac).eigenvalues.iter().copied().collect();
    nodes.sort_by(f64::total_cmp);

    // orthonormal polynomials p_n with p_{n+1} = (x p_n - sqrt(n) p_{n-1}) / sqrt(n+1)
    let eval = |x: f64| -> (f64, f64) {
        let mut p_prev = 0.0;
        let mut p = 1.0;
        for n in 0..k {
            let next = (x * p - (n as f64).sqrt() * p_prev) / ((n + 1) as f64).sqrt();
            p_prev = p;
            p = next;
        }
        // (p_k, p_{k-1}); p_k' = sqrt(k) p_{k-1}
        (p, p_prev)
    };
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (pk, pk1) = eval(*x);
            let step = pk / ((k as f64).sqrt() * pk1);
            *x -= step;
            if step.abs() < 1e-16 * (1.0 + x.abs()) {
                break;
            }
        }
    }
    // exact symmetry
    for i in 0..k / 2 {
        let a = 0.5 * (nodes[k - 1 - i] - nodes[i]);
        nodes[i] = -a;
        nodes[k - 1 - i] = a;
    }
    if k % 2 == 1 {
        nodes[k / 2] = 0.0;
    }
    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            let (_, pk1) = eval(x);
            1.0 / (k as f64 * pk1 * pk1)
        })
        .collect();
    for i in 0..k / 2 {
        let w = 0.5 * (weights[i] + weights[k - 1 - i]);
        weights[i] = w;
        weights[k - 1 - i] = w;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    (nodes, weights)
}

/// Tensor-product rule in `m` dimensions; m = 0 gives the single empty node.
pub fn ghq_rule(m: usize, k: usize) -> Result<GhqRule> {
    if m > 3 {
        return Err(MamError::UnsupportedDimension(m));
    }
    if k == 0 {
        return Err(MamError::InvalidInput("ghq_k must be at least 1".into()));
    }
    let (x, w) = hermite_1d(k);
    let total = k.pow(m as u32);
    let mut nodes = Vec::with_capacity(total * m);
    let mut weights = Vec::with_capacity(total);
    for q in 0..total {
        let mut rest = q;
        let mut weight = 1.0;
        // first coordinate varies slowest
        let mut idx = vec![0usize; m];
        for a in (0..m).rev() {
            idx[a] = rest % k;
            rest /= k;
        }
        for &i in &idx {
            nodes.push(x[i]);
            weight *= w[i];
        }
        weights.push(weight);
    }
    Ok(GhqRule {
        m,
        k,
        nodes,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn double_factorial(n: i64) -> f64 {
        if n <= 0 {
            1.0
        } else {
            n as f64 * double_factorial(n - 2)
        }
    }

    fn moment(p: usize) -> f64 {
        if p % 2 == 1 {
            0.0
        } else {
            double_factorial(p as i64 - 1)
        }
    }

    #[test]
    fn one_node_is_midpoint() {
        let r = ghq_rule(1, 1).unwrap();
        assert_eq!(r.nodes, vec![0.0]);
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn two_nodes_are_roots_of_he2() {
        let r = ghq_rule(1, 2).unwrap();
        assert!((r.nodes[0] + 1.0).abs() < 1e-15 && (r.nodes[1] - 1.0).abs() < 1e-15);
        assert!((r.weights[0] - 0.5).abs() < 1e-15 && (r.weights[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fourth_moment_with_twenty_nodes() {
        let r = ghq_rule(1, 20).unwrap();
        let m4: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(4)).sum();
        assert!((m4 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn weights_sum_to_one_and_moments_are_exact() {
        for k in [1, 2, 3, 5, 8, 13, 20, 25, 30] {
            let r = ghq_rule(1, k).unwrap();
            let s: f64 = r.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-13, "k={k}");
            for p in 0..2 * k {
                let got: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(p as i32)).sum();
                let want = moment(p);
                // odd moments cancel between terms of size E|x|^p
                let scale = moment(p + p % 2).max(1.0);
                assert!((got - want).abs() <= 1e-12 * scale, "k={k} p={p}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn product_rule_moments() {
        let r = ghq_rule(2, 6).unwrap();
        assert_eq!(r.len(), 36);
        let e: f64 = (0..r.len())
            .map(|q| {
                let z = r.node(q);
                r.weights[q] * z[0] * z[0] * z[1].powi(4)
            })
            .sum();
        assert!((e - 3.0).abs() < 1e-12);
        let r3 = ghq_rule(3, 4).unwrap();
        assert!((r3.weights.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        assert!(matches!(ghq_rule(4, 3), Err(MamError::UnsupportedDimension(4))));
    }
}
