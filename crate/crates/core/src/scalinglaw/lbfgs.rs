//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    pub grad_tol: f64,
    /// Stop once the relative objective decrease stays below this for a few steps.
    pub f_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            max_iterations: 500,
            grad_tol: 1e-10,
            f_tol: 1e-14,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimises `f` from `x0`. `fg` writes the gradient into its second argument
/// and returns the objective; a non-finite return marks an infeasible point.
///
/// Returns `None` when the objective is not finite at `x0`.
pub fn minimize<F>(mut fg: F, x0: &[f64], opts: &LbfgsOptions) -> Option<LbfgsResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = fg(&x, &mut g);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut alpha = vec![0.0; opts.memory];
    let mut stalls = 0;

    for it in 0..opts.max_iterations {
        if inf_norm(&g) <= opts.grad_tol {
            return Some(LbfgsResult { x, f, iterations: it, converged: true });
        }
        // two-loop recursion
        d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
        for (i, (s, y, rho)) in hist.iter().enumerate().rev() {
            let a = rho * dot(s, &d);
            alpha[i] = a;
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|di| *di *= gamma);
        } else {
            let scale = 1.0 / inf_norm(&g).max(1.0);
            d.iter_mut().for_each(|di| *di *= scale);
        }
        for (i, (s, y, rho)) in hist.iter().enumerate() {
            let b = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (alpha[i] - b) * si);
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            // not a descent direction: fall back to steepest descent
            hist.clear();
            d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi / inf_norm(&g).max(1.0));
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut f_new = f64::NAN;
        for _ in 0..60 {
            x_new.iter_mut().zip(&x).zip(&d).for_each(|((xn, xi), di)| *xn = xi + step * di);
            let f_try = fg(&x_new, &mut g_new);
            if f_try.is_finite() && f_try <= f + 1e-4 * step * slope && g_new.iter().all(|v| v.is_finite()) {
                f_new = f_try;
                break;
            }
            step *= 0.5;
        }
        if f_new.is_nan() {
            return Some(LbfgsResult { x, f, iterations: it, converged: inf_norm(&g) <= opts.grad_tol.sqrt() });
        }

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if hist.len() == opts.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let rel = (f - f_new) / f.abs().max(1e-300);
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
        if rel < opts.f_tol {
            stalls += 1;
            if stalls >= 3 {
                return Some(LbfgsResult { x, f, iterations: it + 1, converged: true });
            }
        } else {
            stalls = 0;
        }
    }
    let converged = inf_norm(&g) <= opts.grad_tol;
    Some(LbfgsResult { x, f, iterations: opts.max_iterations, converged })
}
