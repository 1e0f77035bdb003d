//! Box-constrained BFGS with finite-difference gradients.

use nalgebra::{DMatrix, DVector};

use crate::error::{MamError, Result};

#[derive(Debug, Clone, Copy)]
pub struct OuterOptions {
    /// Stop when an accepted step changes f by at most rel_tol (1 + |f|)
    /// and the projected gradient is below `loose_grad_tol`.
    pub rel_tol: f64,
    /// Stop outright when the projected gradient max-norm falls below this.
    pub grad_tol: f64,
    pub loose_grad_tol: f64,
    pub fd_step: f64,
    /// Step of the finite-difference Hessian used by the Newton polish
    /// that follows a loose stop.
    pub newton_step: f64,
    pub newton_iters: usize,
    pub max_evals: usize,
    /// Largest allowed change of any coordinate in one step.
    pub max_step: f64,
}

impl Default for OuterOptions {
    fn default() -> Self {
        OuterOptions {
            rel_tol: 1e-6,
            grad_tol: 1e-4,
            loose_grad_tol: 1e-2,
            fd_step: 1e-4,
            newton_step: 1e-3,
            newton_iters: 4,
            max_evals: 500,
            max_step: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OuterResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub iterations: usize,
    pub projected_grad: f64,
    /// Objective value after every accepted step.
    pub trace: Vec<f64>,
}

struct Counted<F> {
    f: F,
    evals: usize,
    limit: usize,
    trace: Vec<f64>,
}

impl<F: FnMut(&[f64]) -> Result<f64>> Counted<F> {
    fn call(&mut self, x: &[f64]) -> Result<f64> {
        if self.evals >= self.limit {
            return Err(MamError::OuterNotConverged {
                evaluations: self.evals,
                trace: self.trace.clone(),
            });
        }
        self.evals += 1;
        // a failed inner solve is treated as an infinitely bad point
        Ok(match (self.f)(x) {
            Ok(v) if v.is_finite() => v,
            Ok(_) => f64::INFINITY,
            Err(e) if e.is_numerical() => f64::INFINITY,
            Err(e) => return Err(e),
        })
    }
}

fn clamp(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

/// Central differences, one-sided next to a bound.
fn fd_gradient<F: FnMut(&[f64]) -> Result<f64>>(
    f: &mut Counted<F>,
    x: &[f64],
    fx: f64,
    lo: &[f64],
    hi: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let up = x[i] + h <= hi[i];
        let down = x[i] - h >= lo[i];
        let fp = if up {
            xp[i] = x[i] + h;
            let v = f.call(&xp)?;
            xp[i] = x[i];
            Some(v)
        } else {
            None
        };
        let fm = if down {
            xp[i] = x[i] - h;
            let v = f.call(&xp)?;
            xp[i] = x[i];
            Some(v)
        } else {
            None
        };
        g[i] = match (fp, fm) {
            (Some(a), Some(b)) => (a - b) / (2.0 * h),
            (Some(a), None) => (a - fx) / h,
            (None, Some(b)) => (fx - b) / h,
            (None, None) => 0.0,
        };
        if !g[i].is_finite() {
            // an infinite neighbour: fall back to the finite side
            g[i] = match (fp, fm) {
                (Some(a), _) if a.is_finite() => (a - fx) / h,
                (_, Some(b)) if b.is_finite() => (fx - b) / h,
                _ => 0.0,
            };
        }
    }
    Ok(g)
}

fn active_set(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64], h: f64) -> Vec<bool> {
    (0..x.len())
        .map(|i| (x[i] - lo[i] < h && g[i] > 0.0) || (hi[i] - x[i] < h && g[i] < 0.0))
        .collect()
}

fn projected_norm(g: &[f64], active: &[bool]) -> f64 {
    g.iter()
        .zip(active)
        .filter(|(_, a)| !**a)
        .fold(0.0, |m, (v, _)| m.max(v.abs()))
}

/// Minimizes `f` over the box [lo, hi] starting from `x0`.
pub fn minimize<F: FnMut(&[f64]) -> Result<f64>>(
    f: F,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: OuterOptions,
) -> Result<OuterResult> {
    let n = x0.len();
    let mut fc = Counted {
        f,
        evals: 0,
        limit: opts.max_evals,
        trace: Vec::new(),
    };
    let mut x = x0.to_vec();
    clamp(&mut x, lo, hi);
    let mut fx = fc.call(&x)?;
    if !fx.is_finite() {
        return Err(MamError::OuterNotConverged {
            evaluations: fc.evals,
            trace: vec![fx],
        });
    }
    fc.trace.push(fx);
    if n == 0 {
        return Ok(OuterResult {
            x,
            value: fx,
            evaluations: fc.evals,
            iterations: 0,
            projected_grad: 0.0,
            trace: fc.trace,
        });
    }
    let mut g = fd_gradient(&mut fc, &x, fx, lo, hi, opts.fd_step)?;
    let mut binv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;

    for _ in 0..opts.newton_iters {
        loop {
            let active = active_set(&x, &g, lo, hi, opts.fd_step);
            let pg = projected_norm(&g, &active);
            if pg <= opts.grad_tol {
                break;
            }
            iterations += 1;

            let gv = DVector::from_fn(n, |i, _| if active[i] { 0.0 } else { g[i] });
            let mut dir = -(&binv * &gv);
            for i in 0..n {
                if active[i] {
                    dir[i] = 0.0;
                }
            }
            if dir.dot(&gv) >= 0.0 {
                binv = DMatrix::identity(n, n);
                fresh = true;
                dir = -gv.clone();
            }
            let big = dir.amax();
            if big > opts.max_step {
                dir *= opts.max_step / big;
            }

            let mut s = 1.0;
            let mut next = None;
            for _ in 0..30 {
                let mut trial: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, b)| a + s * b).collect();
                clamp(&mut trial, lo, hi);
                let decrease: f64 = trial.iter().zip(&x).zip(&g).map(|((t, a), gi)| (t - a) * gi).sum();
                let ft = fc.call(&trial)?;
                if ft.is_finite() && ft <= fx + 1e-4 * decrease.min(0.0) {
                    next = Some((trial, ft));
                    break;
                }
                s *= 0.5;
            }

            let Some((xn, fxn)) = next else {
                if !fresh {
                    binv = DMatrix::identity(n, n);
                    fresh = true;
                    continue;
                }
                if pg <= opts.loose_grad_tol {
                    break;
                }
                return Err(MamError::OuterNotConverged {
                    evaluations: fc.evals,
                    trace: fc.trace.clone(),
                });
            };

            let change = (fx - fxn).abs();
            let gn = fd_gradient(&mut fc, &xn, fxn, lo, hi, opts.fd_step)?;
            let sv = DVector::from_fn(n, |i, _| xn[i] - x[i]);
            let yv = DVector::from_fn(n, |i, _| gn[i] - g[i]);
            let sy = sv.dot(&yv);
            if sy > 1e-12 * sv.norm() * yv.norm() {
                if fresh {
                    // Shanno–Phua scaling of the initial inverse Hessian
                    binv = DMatrix::identity(n, n) * (sy / yv.dot(&yv));
                }
                let rho = 1.0 / sy;
                let id = DMatrix::<f64>::identity(n, n);
                let a = &id - rho * &sv * yv.transpose();
                binv = &a * &binv * a.transpose() + rho * &sv * sv.transpose();
                fresh = false;
            }
            x = xn;
            fx = fxn;
            g = gn;
            fc.trace.push(fx);

            let active = active_set(&x, &g, lo, hi, opts.fd_step);
            let pg = projected_norm(&g, &active);
            if change <= opts.rel_tol * (1.0 + fx.abs()) && pg <= opts.loose_grad_tol {
                break;
            }
        }
        match polish(&mut fc, &mut x, &mut fx, &mut g, lo, hi, opts) {
            // left a saddle or flat ridge: resume BFGS from the new point
            Ok(true) => {
                binv = DMatrix::identity(n, n);
                fresh = true;
            }
            // the budget ran out while polishing; keep the last accepted point
            Err(MamError::OuterNotConverged { .. }) | Ok(false) => break,
            Err(e) => return Err(e),
        }
    }
    let active = active_set(&x, &g, lo, hi, opts.fd_step);
    Ok(OuterResult {
        projected_grad: projected_norm(&g, &active),
        x,
        value: fx,
        evaluations: fc.evals,
        iterations,
        trace: fc.trace,
    })
}

/// Projected Newton steps with a finite-difference Hessian on the free
/// coordinates. BFGS on noisy gradients creeps near the optimum, and its loose
/// stop can fire on a saddle. Returns true after a step taken on an indefinite
/// Hessian, so the caller resumes BFGS.
fn polish<F: FnMut(&[f64]) -> Result<f64>>(
    fc: &mut Counted<F>,
    x: &mut Vec<f64>,
    fx: &mut f64,
    g: &mut Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    opts: OuterOptions,
) -> Result<bool> {
    let h = opts.newton_step;
    for _ in 0..opts.newton_iters {
        let active = active_set(x, g, lo, hi, opts.fd_step);
        if projected_norm(g, &active) <= opts.grad_tol {
            return Ok(false);
        }
        let free: Vec<usize> = (0..x.len())
            .filter(|&i| !active[i] && x[i] - lo[i] >= h && hi[i] - x[i] >= h)
            .collect();
        if free.is_empty() {
            return Ok(false);
        }
        let gf = DVector::from_fn(free.len(), |a, _| g[free[a]]);
        let eig = fd_hessian(|p| fc.call(p), x, *fx, &free, h)?.symmetric_eigen();
        let scale = eig.eigenvalues.amax().max(1.0);
        let floor = 1e-8 * scale;
        let (kmin, lmin) = eig.eigenvalues.argmin();
        let indefinite = lmin <= floor;
        // Newton on |λ|, plus a push down the most negative curvature direction
        let mut step = DVector::zeros(free.len());
        for k in 0..free.len() {
            let q = eig.eigenvectors.column(k);
            step -= q * (q.dot(&gf) / eig.eigenvalues[k].abs().max(floor));
        }
        if indefinite {
            let q = eig.eigenvectors.column(kmin);
            let sign = if q.dot(&gf) > 0.0 { -1.0 } else { 1.0 };
            step += q * (sign * 0.5 * opts.max_step);
        }
        let big = step.amax();
        if big > opts.max_step {
            step *= opts.max_step / big;
        }
        let mut s = 1.0;
        let mut next = None;
        for _ in 0..20 {
            let mut trial = x.clone();
            for (a, &i) in free.iter().enumerate() {
                trial[i] += s * step[a];
            }
            clamp(&mut trial, lo, hi);
            let ft = fc.call(&trial)?;
            if ft.is_finite() && ft < *fx {
                next = Some((trial, ft));
                break;
            }
            s *= 0.5;
        }
        let Some((xn, fxn)) = next else {
            return Ok(false);
        };
        *g = fd_gradient(fc, &xn, fxn, lo, hi, opts.fd_step)?;
        *x = xn;
        *fx = fxn;
        fc.trace.push(fxn);
        if indefinite {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Central finite-difference Hessian of `f` at `x` over the coordinates
/// flagged in `free`; returns a |free| x |free| matrix.
pub fn fd_hessian<F: FnMut(&[f64]) -> Result<f64>>(
    mut f: F,
    x: &[f64],
    fx: f64,
    free: &[usize],
    h: f64,
) -> Result<DMatrix<f64>> {
    let k = free.len();
    let mut hm = DMatrix::zeros(k, k);
    let mut xp = x.to_vec();
    let mut eval = |shifts: &[(usize, f64)], xp: &mut Vec<f64>| -> Result<f64> {
        for &(i, s) in shifts {
            xp[i] += s;
        }
        let v = f(xp);
        xp.copy_from_slice(x);
        v
    };
    for a in 0..k {
        let i = free[a];
        let fp = eval(&[(i, h)], &mut xp)?;
        let fm = eval(&[(i, -h)], &mut xp)?;
        hm[(a, a)] = (fp - 2.0 * fx + fm) / (h * h);
        for b in 0..a {
            let j = free[b];
            let fpp = eval(&[(i, h), (j, h)], &mut xp)?;
            let fpm = eval(&[(i, h), (j, -h)], &mut xp)?;
            let fmp = eval(&[(i, -h), (j, h)], &mut xp)?;
            let fmm = eval(&[(i, -h), (j, -h)], &mut xp)?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
            hm[(a, b)] = v;
            hm[(b, a)] = v;
        }
    }
    Ok(hm)
}
