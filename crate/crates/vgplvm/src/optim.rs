//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The optimiser consumes (value, gradient) callbacks and minimises; the
//! training loop feeds it the negated bound. Accepted steps satisfy the
//! sufficient-decrease condition, so the objective is monotone up to the
//! line-search tolerance.

use nalgebra::DVector;
use std::collections::VecDeque;

use crate::error::{Error, Result};

/// A differentiable objective to minimise.
pub trait Objective {
    fn eval(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
}

impl<F> Objective for F
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    fn eval(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self(x)
    }
}

#[derive(Debug, Clone)]
pub struct OptimOptions {
    pub max_iters: usize,
    /// Stop when the max-norm of the gradient falls below this.
    pub grad_tol: f64,
    /// Stop when the relative objective change falls below this.
    pub f_tol: f64,
    /// History pairs kept for the inverse-Hessian approximation.
    pub memory: usize,
    /// Keep the accepted iterates (including the start) in the result.
    pub record_points: bool,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_iters: 200,
            grad_tol: 1e-6,
            f_tol: 1e-10,
            memory: 10,
            record_points: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub gradient: DVector<f64>,
    /// Objective value at the starting point and after every accepted step.
    pub trace: Vec<f64>,
    /// Accepted iterates when `record_points` was set.
    pub points: Option<Vec<DVector<f64>>>,
    pub iterations: usize,
    pub converged: bool,
}

fn check_finite(f: f64, g: &DVector<f64>, where_: &str) -> Result<()> {
    if !f.is_finite() {
        return Err(Error::Numerical(format!("non-finite objective value at {where_}: {f}")));
    }
    if let Some(idx) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient coordinate {idx} at {where_} (|g| has {} entries)",
            g.len()
        )));
    }
    Ok(())
}

/// Minimise `objective` starting from `x0`.
pub fn minimize(
    objective: &mut dyn Objective,
    x0: DVector<f64>,
    opts: &OptimOptions,
) -> Result<OptimResult> {
    let _n = x0.len();
    let mut x = x0;
    let (mut f, mut g) = objective.eval(&x)?;
    check_finite(f, &g, "initial point")?;
    let mut trace = vec![f];
    let mut points = if opts.record_points { Some(vec![x.clone()]) } else { None };
    let mut s_hist: VecDeque<DVector<f64>> = VecDeque::new();
    let mut y_hist: VecDeque<DVector<f64>> = VecDeque::new();
    let mut rho_hist: VecDeque<f64> = VecDeque::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iters {
        if g.amax() < opts.grad_tol {
            converged = true;
            break;
        }
        // Two-loop recursion for the search direction.
        let mut dir = -g.clone();
        let k = s_hist.len();
        let mut alphas = vec![0.0; k];
        for i in (0..k).rev() {
            alphas[i] = rho_hist[i] * s_hist[i].dot(&dir);
            dir -= &y_hist[i] * alphas[i];
        }
        if k > 0 {
            let gamma = s_hist[k - 1].dot(&y_hist[k - 1]) / y_hist[k - 1].norm_squared();
            dir *= gamma.max(1e-12);
        }
        for i in 0..k {
            let beta = rho_hist[i] * y_hist[i].dot(&dir);
            dir += &s_hist[i] * (alphas[i] - beta);
        }
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            // Not a descent direction; fall back to steepest descent.
            dir = -g.clone();
            slope = g.dot(&dir);
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
        }

        match wolfe_line_search(objective, &x, f, &g, &dir, slope)? {
            Some((step, fx, gx, xnew)) => {
                let s = &xnew - &x;
                let y = &gx - &g;
                let sy = s.dot(&y);
                if sy > 1e-10 * s.norm() * y.norm() {
                    if s_hist.len() == opts.memory {
                        s_hist.pop_front();
                        y_hist.pop_front();
                        rho_hist.pop_front();
                    }
                    rho_hist.push_back(1.0 / sy);
                    s_hist.push_back(s);
                    y_hist.push_back(y);
                }
                let f_prev = f;
                x = xnew;
                f = fx;
                g = gx;
                trace.push(f);
                if let Some(pts) = points.as_mut() {
                    pts.push(x.clone());
                }
                iterations += 1;
                let _ = step;
                if (f_prev - f).abs() <= opts.f_tol * (1.0 + f.abs()) {
                    converged = true;
                    break;
                }
            }
            None => {
                // Line search could not make progress; stop at the best point.
                break;
            }
        }
    }
    Ok(OptimResult { x, f, gradient: g, trace, points, iterations, converged })
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LS_EVALS: usize = 30;

type LinePoint = (f64, f64, DVector<f64>, DVector<f64>);

/// Strong-Wolfe line search (bracket and zoom). Returns the accepted step or
/// `None` if no acceptable step exists within the evaluation budget.
fn wolfe_line_search(
    objective: &mut dyn Objective,
    x: &DVector<f64>,
    f0: f64,
    _g0: &DVector<f64>,
    dir: &DVector<f64>,
    slope0: f64,
) -> Result<Option<LinePoint>> {
    let eval = |obj: &mut dyn Objective, alpha: f64| -> Result<(f64, DVector<f64>, DVector<f64>)> {
        let xa = x + dir * alpha;
        let (fa, ga) = obj.eval(&xa)?;
        check_finite(fa, &ga, "line search")?;
        Ok((fa, ga, xa))
    };

    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut slope_prev = slope0;
    let mut alpha = 1.0;
    let mut evals = 0;

    while evals < MAX_LS_EVALS {
        let (fa, ga, xa) = match eval(objective, alpha) {
            Ok(v) => v,
            Err(Error::Numerical(_) | Error::State(_)) if evals < MAX_LS_EVALS - 1 => {
                // Stepped into a numerically bad region; shrink.
                alpha *= 0.25;
                evals += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        evals += 1;
        let slope_a = ga.dot(dir);
        if fa > f0 + C1 * alpha * slope0 || (evals > 1 && fa >= f_prev) {
            return zoom(
                objective, x, f0, slope0, dir, alpha_prev, f_prev, slope_prev, alpha, fa,
                evals,
            );
        }
        if slope_a.abs() <= -C2 * slope0 {
            return Ok(Some((alpha, fa, ga, xa)));
        }
        if slope_a >= 0.0 {
            return zoom(
                objective, x, f0, slope0, dir, alpha, fa, slope_a, alpha_prev, f_prev, evals,
            );
        }
        alpha_prev = alpha;
        f_prev = fa;
        slope_prev = slope_a;
        alpha *= 2.0;
        let _ = slope_prev;
    }
    Ok(None)
}

#[allow(clippy::too_many_arguments)]
fn zoom(
    objective: &mut dyn Objective,
    x: &DVector<f64>,
    f0: f64,
    slope0: f64,
    dir: &DVector<f64>,
    mut lo: f64,
    mut f_lo: f64,
    mut slope_lo: f64,
    mut hi: f64,
    mut f_hi: f64,
    mut evals: usize,
) -> Result<Option<LinePoint>> {
    while evals < MAX_LS_EVALS {
        // Bisection with a quadratic-interpolation candidate.
        let mut alpha = 0.5 * (lo + hi);
        let denom = 2.0 * (f_hi - f_lo - slope_lo * (hi - lo));
        if denom.abs() > 1e-300 {
            let cand = lo - slope_lo * (hi - lo) * (hi - lo) / denom;
            let (a, b) = if lo < hi { (lo, hi) } else { (hi, lo) };
            let margin = 0.1 * (b - a);
            if cand.is_finite() && cand > a + margin && cand < b - margin {
                alpha = cand;
            }
        }
        let xa = x + dir * alpha;
        let evaluated = objective.eval(&xa).and_then(|(fa, ga)| {
            check_finite(fa, &ga, "zoom")?;
            Ok((fa, ga))
        });
        evals += 1;
        let (fa, ga) = match evaluated {
            Ok(v) => v,
            Err(Error::Numerical(_) | Error::State(_)) => {
                // Numerically bad region: treat the trial point as too far.
                hi = alpha;
                f_hi = f64::INFINITY;
                if (hi - lo).abs() < 1e-14 {
                    return Ok(None);
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        let slope_a = ga.dot(dir);
        if fa > f0 + C1 * alpha * slope0 || fa >= f_lo {
            hi = alpha;
            f_hi = fa;
        } else {
            if slope_a.abs() <= -C2 * slope0 {
                return Ok(Some((alpha, fa, ga, xa)));
            }
            if slope_a * (hi - lo) >= 0.0 {
                hi = lo;
                f_hi = f_lo;
            }
            lo = alpha;
            f_lo = fa;
            slope_lo = slope_a;
        }
        if (hi - lo).abs() < 1e-14 {
            if f_lo < f0 {
                let xl = x + dir * lo;
                let (fl, gl) = objective.eval(&xl)?;
                return Ok(Some((lo, fl, gl, xl)));
            }
            return Ok(None);
        }
    }
    // Budget exhausted: accept the best sufficient-decrease point if any.
    if f_lo < f0 + C1 * lo * slope0 && lo > 0.0 {
        let xl = x + dir * lo;
        let (fl, gl) = objective.eval(&xl)?;
        return Ok(Some((lo, fl, gl, xl)));
    }
    Ok(None)
}
