//! Limited-memory quasi-Newton minimisation under box constraints.
//!
//! Projected L-BFGS: variables sitting on a bound with the gradient pushing
//! outward are held fixed for the iteration, the two-loop recursion runs on
//! the remaining ones, and a backtracking Armijo search is carried out along
//! the projected path. Stopping rules follow the usual L-BFGS-B conventions
//! (projected-gradient sup-norm and relative reduction of the objective).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{CicmeError, Result};

/// Objective with analytic gradient.
pub trait Problem {
    /// Returns `f(x)` and writes the gradient into `grad`.
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbfgsbConfig {
    /// Number of stored correction pairs.
    pub memory: usize,
    pub max_iterations: usize,
    pub max_evaluations: usize,
    /// Stop when `(f_k - f_{k+1}) / max(|f_k|, |f_{k+1}|, 1) <= ftol`.
    pub ftol: f64,
    /// Stop when the projected gradient's sup-norm is at most `pgtol`.
    pub pgtol: f64,
}

impl Default for LbfgsbConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 15_000,
            max_evaluations: 15_000,
            ftol: 2.220_446_049_250_313e-9,
            pgtol: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    ProjectedGradient,
    RelativeReduction,
    MaxIterations,
    MaxEvaluations,
    /// No acceptable step along a steepest-descent direction.
    LineSearch,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

/// Box `[lower_i, upper_i]`; infinite entries mean unbounded.
#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Self { lower: vec![f64::NEG_INFINITY; n], upper: vec![f64::INFINITY; n] }
    }

    fn project(&self, x: &mut [f64]) {
        for ((xi, &l), &u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *xi = xi.clamp(l, u);
        }
    }

    /// Whether coordinate `i` is pinned: on a bound with descent pointing out.
    #[inline]
    fn pinned(&self, i: usize, x: f64, g: f64) -> bool {
        (x <= self.lower[i] && g > 0.0) || (x >= self.upper[i] && g < 0.0)
    }
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

pub fn minimize<P: Problem>(
    problem: &mut P,
    x0: &[f64],
    bounds: &Bounds,
    config: &LbfgsbConfig,
) -> Result<Minimum> {
    let n = x0.len();
    if bounds.lower.len() != n || bounds.upper.len() != n {
        return Err(CicmeError::Structural("bounds do not match the parameter count".into()));
    }
    if bounds.lower.iter().zip(&bounds.upper).any(|(l, u)| l > u) {
        return Err(CicmeError::Argument("lower bound above upper bound".into()));
    }
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![0.0; n];
    let mut f = problem.evaluate(&x, &mut g);
    let mut evaluations = 1;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(CicmeError::Numeric(format!("objective not finite at the start point ({f})")));
    }

    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(config.memory);
    let mut free = vec![true; n];
    let mut dir = vec![0.0; n];
    let mut alpha = vec![0.0; config.memory];
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];

    let finish = |x: Vec<f64>, f, iterations, evaluations, termination| Minimum {
        x,
        f,
        iterations,
        evaluations,
        termination,
    };

    for iteration in 0..config.max_iterations {
        let mut pg_norm = 0.0f64;
        for i in 0..n {
            free[i] = !bounds.pinned(i, x[i], g[i]);
            if free[i] {
                // distance to the bound caps the projected gradient component
                let pgi = if g[i] < 0.0 {
                    g[i].max(x[i] - bounds.upper[i])
                } else {
                    g[i].min(x[i] - bounds.lower[i])
                };
                pg_norm = pg_norm.max(pgi.abs());
            }
        }
        if pg_norm <= config.pgtol {
            return Ok(finish(x, f, iteration, evaluations, Termination::ProjectedGradient));
        }

        two_loop(&memory, &g, &free, &mut alpha, &mut dir);
        let slope: f64 = dir.iter().zip(&g).map(|(d, gi)| d * gi).sum();
        if !(slope < 0.0) {
            memory.clear();
            steepest(&g, &free, &mut dir);
        }

        let mut step = if memory.is_empty() {
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            (1.0 / norm).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            bounds.project(&mut x_new);
            let decrease: f64 = (0..n).map(|i| g[i] * (x_new[i] - x[i])).sum();
            if decrease == 0.0 && x_new == x {
                break;
            }
            let f_trial = problem.evaluate(&x_new, &mut g_new);
            evaluations += 1;
            if f_trial.is_finite()
                && g_new.iter().all(|v| v.is_finite())
                && f_trial <= f + ARMIJO * decrease
            {
                accepted = Some(f_trial);
                break;
            }
            if evaluations >= config.max_evaluations {
                return Ok(finish(x, f, iteration, evaluations, Termination::MaxEvaluations));
            }
            step *= 0.5;
        }

        let Some(f_next) = accepted else {
            if memory.is_empty() {
                return Ok(finish(x, f, iteration, evaluations, Termination::LineSearch));
            }
            memory.clear();
            continue;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        // curvature pairs that are not positive enough would break H > 0
        if sy > f64::EPSILON * yy {
            if memory.len() == config.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }

        let reduction = (f - f_next) / f.abs().max(f_next.abs()).max(1.0);
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_next;
        if reduction <= config.ftol {
            return Ok(finish(x, f, iteration + 1, evaluations, Termination::RelativeReduction));
        }
        if evaluations >= config.max_evaluations {
            return Ok(finish(x, f, iteration + 1, evaluations, Termination::MaxEvaluations));
        }
    }
    Ok(finish(x, f, config.max_iterations, evaluations, Termination::MaxIterations))
}

fn steepest(g: &[f64], free: &[bool], dir: &mut [f64]) {
    for i in 0..g.len() {
        dir[i] = if free[i] { -g[i] } else { 0.0 };
    }
}

/// `dir = -H g` restricted to the free coordinates.
fn two_loop(
    memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    g: &[f64],
    free: &[bool],
    alpha: &mut [f64],
    dir: &mut [f64],
) {
    steepest(g, free, dir);
    if memory.is_empty() {
        return;
    }
    // dir holds -q throughout; signs are folded into the updates.
    for (m, (s, y, rho)) in memory.iter().enumerate().rev() {
        let a = rho * masked_dot(s, dir, free);
        alpha[m] = a;
        for i in 0..dir.len() {
            if free[i] {
                dir[i] -= a * y[i];
            }
        }
    }
    let (s, y, _) = memory.back().expect("non-empty");
    let sy = masked_dot(s, y, free);
    let yy = masked_dot(y, y, free);
    let gamma = if sy > 0.0 && yy > 0.0 { sy / yy } else { 1.0 };
    dir.iter_mut().for_each(|d| *d *= gamma);
    for (m, (s, y, rho)) in memory.iter().enumerate() {
        let b = rho * masked_dot(y, dir, free);
        for i in 0..dir.len() {
            if free[i] {
                dir[i] += s[i] * (alpha[m] - b);
            }
        }
    }
}

fn masked_dot(a: &[f64], b: &[f64], free: &[bool]) -> f64 {
    a.iter()
        .zip(b)
        .zip(free)
        .filter(|(_, &f)| f)
        .map(|((x, y), _)| x * y)
        .sum()
}
