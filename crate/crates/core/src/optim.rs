//! Limited-memory BFGS minimizer with a weak-Wolfe bisection line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub max_iters: usize,
    /// Stop when the infinity norm of the gradient drops below this.
    pub grad_tol: f64,
    /// Stop when the relative objective decrease of one iteration drops below this.
    pub f_tol: f64,
    pub memory: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { max_iters: 500, grad_tol: 1e-8, f_tol: 1e-10, memory: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    ObjectiveStalled,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimizes `objective`, which returns `(value, gradient)` and may return a
/// non-finite value to mark a point as infeasible. Returns `None` if the
/// starting point itself is infeasible.
pub fn minimize<F>(mut objective: F, x0: Vec<f64>, cfg: &LbfgsConfig) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0;
    let (mut f, mut g) = objective(&x);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        if inf_norm(&g) <= cfg.grad_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        iterations += 1;

        // Two-loop recursion.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &d);
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
            alphas.push(a);
        }
        let gamma = match history.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / inf_norm(&g).max(1.0),
        };
        d.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            history.clear();
            d = g.iter().map(|v| -v / inf_norm(&g).max(1.0)).collect();
            slope = dot(&g, &d);
        }

        let Some((t, f_new, g_new)) = line_search(&mut objective, &x, f, slope, &d) else {
            termination = Termination::LineSearchFailed;
            break;
        };
        let x_new: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let decrease = f - f_new;
        x = x_new;
        f = f_new;
        g = g_new;
        if decrease <= cfg.f_tol * f.abs().max(1.0) {
            termination = Termination::ObjectiveStalled;
            break;
        }
    }
    if iterations == cfg.max_iters && inf_norm(&g) <= cfg.grad_tol {
        termination = Termination::GradientTolerance;
    }
    Some(Minimum { x, value: f, gradient: g, iterations, termination })
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LINE_STEPS: usize = 40;

fn line_search<F>(objective: &mut F, x: &[f64], f0: f64, slope: f64, d: &[f64]) -> Option<(f64, f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    let mut t = 1.0;
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    let mut trial = vec![0.0; x.len()];
    for _ in 0..MAX_LINE_STEPS {
        trial.iter_mut().zip(x.iter().zip(d)).for_each(|(v, (xi, di))| *v = xi + t * di);
        let (f, g) = objective(&trial);
        let feasible = f.is_finite() && g.iter().all(|v| v.is_finite());
        if !feasible || f > f0 + C1 * t * slope {
            hi = t;
        } else {
            let improves = best.as_ref().is_none_or(|b| f < b.1);
            let curvature_ok = dot(&g, d) >= C2 * slope;
            if curvature_ok {
                return Some((t, f, g));
            }
            if improves {
                best = Some((t, f, g));
            }
            lo = t;
        }
        t = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * lo };
    }
    // Sufficient decrease without curvature is still progress.
    best
}
