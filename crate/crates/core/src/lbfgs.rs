//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The search direction comes from the two-loop recursion over at most
//! `memory` stored `(s, y)` pairs with initial Hessian `γ_k·I`,
//! `γ_k = sᵀy / yᵀy` of the newest pair (`γ = 1` with no pairs). Steps are
//! found by bracketing and zoom with safeguarded cubic interpolation,
//! starting from `α = 1`, then optionally improved by one secant step on the
//! directional derivative (see [`LbfgsConfig::refine_tol`]).

use std::collections::VecDeque;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    /// Stop once `‖∇f‖_∞` falls to this value.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Oracle evaluations allowed per line search.
    pub max_line_search_steps: usize,
    /// After a strong-Wolfe step with `|∇f(x+αd)ᵀd| > refine_tol·|∇f(x)ᵀd|`,
    /// try the secant minimizer of the directional derivative (exact on
    /// quadratics) and keep it if it also satisfies strong Wolfe and lowers
    /// `f`. A negative value disables this.
    #[serde(default = "default_refine_tol")]
    pub refine_tol: f64,
}

fn default_refine_tol() -> f64 {
    REFINE_TOL
}

const REFINE_TOL: f64 = 1e-3;

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            grad_tol: 1e-6,
            max_iters: 200,
            max_line_search_steps: 40,
            refine_tol: default_refine_tol(),
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.wolfe_c1 > 0.0
            && self.wolfe_c1 < 0.5
            && self.wolfe_c2 > self.wolfe_c1
            && self.wolfe_c2 < 1.0
            && self.grad_tol >= 0.0
            && self.max_line_search_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid L-BFGS configuration {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    /// No strong-Wolfe step was found; the best point seen was kept.
    LineSearchFailed,
}

/// One accepted step: `α`, and value / directional derivative before and after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub alpha: f64,
    pub f0: f64,
    pub slope0: f64,
    pub f1: f64,
    pub slope1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbfgsReport {
    pub iterations: usize,
    /// Objective at the start and after every iteration.
    pub values: Vec<f64>,
    pub grad_evals: usize,
    pub value_evals: usize,
    pub termination: Termination,
    pub final_grad_inf: f64,
    pub steps: Vec<StepRecord>,
    /// Iterations whose two-loop direction was not a descent direction.
    pub direction_resets: usize,
}

impl LbfgsReport {
    pub fn final_value(&self) -> f64 {
        *self.values.last().expect("at least the starting value")
    }
}

struct Pair {
    s: Array1<f64>,
    y: Array1<f64>,
    rho: f64,
}

fn inf_norm(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

/// `-H·g` by the two-loop recursion.
fn two_loop(g: &Array1<f64>, pairs: &VecDeque<Pair>) -> Array1<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for p in pairs.iter().rev() {
        let a = p.rho * p.s.dot(&q);
        q.scaled_add(-a, &p.y);
        alphas.push(a);
    }
    let gamma = pairs.back().map_or(1.0, |p| p.s.dot(&p.y) / p.y.dot(&p.y));
    q *= gamma;
    for (p, &a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = p.rho * p.y.dot(&q);
        q.scaled_add(a - b, &p.s);
    }
    -q
}

struct Probe {
    alpha: f64,
    x: Array1<f64>,
    f: f64,
    g: Array1<f64>,
    slope: f64,
}

struct Evaluator<'a, F> {
    oracle: &'a mut F,
    evals: usize,
}

impl<F> Evaluator<'_, F>
where
    F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>)>,
{
    fn eval(&mut self, x: &Array1<f64>) -> Result<(f64, Array1<f64>)> {
        self.evals += 1;
        let (f, g) = (self.oracle)(x)?;
        if g.len() != x.len() {
            return Err(Error::Shape(format!(
                "oracle returned gradient of length {} for point of length {}",
                g.len(),
                x.len()
            )));
        }
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "oracle returned a non-finite value or gradient (f = {f})"
            )));
        }
        Ok((f, g))
    }

    fn probe(&mut self, x: &Array1<f64>, d: &Array1<f64>, alpha: f64) -> Result<Probe> {
        let xa = x + &(d * alpha);
        let (f, g) = self.eval(&xa)?;
        let slope = g.dot(d);
        Ok(Probe {
            alpha,
            x: xa,
            f,
            g,
            slope,
        })
    }
}

/// Minimizer of the cubic interpolating values and slopes at `a` and `b`,
/// kept inside the middle 80% of the interval (bisection otherwise).
fn cubic_step(a: &Probe, b: &Probe) -> f64 {
    let (lo, hi) = if a.alpha < b.alpha {
        (a.alpha, b.alpha)
    } else {
        (b.alpha, a.alpha)
    };
    let width = hi - lo;
    let d1 = a.slope + b.slope - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.slope * b.slope;
    let mid = 0.5 * (lo + hi);
    if !(disc >= 0.0) {
        return mid;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let denom = b.slope - a.slope + 2.0 * d2;
    if denom == 0.0 {
        return mid;
    }
    let t = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / denom;
    if t.is_finite() && t >= lo + 0.1 * width && t <= hi - 0.1 * width {
        t
    } else {
        mid
    }
}

enum Search {
    Found(Probe),
    Failed(Option<Probe>),
}

/// One secant step on `α ↦ ∇f(x+αd)ᵀd` through `0` and `found.alpha`; the
/// result replaces `found` only if it satisfies strong Wolfe and lowers `f`.
#[allow(clippy::too_many_arguments)]
fn refine<F>(
    ev: &mut Evaluator<'_, F>,
    x: &Array1<f64>,
    d: &Array1<f64>,
    f0: f64,
    slope0: f64,
    found: Probe,
    budget: usize,
    cfg: &LbfgsConfig,
) -> Result<Search>
where
    F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>)>,
{
    let curve = found.slope - slope0;
    let skip = budget == 0
        || cfg.refine_tol < 0.0
        || found.slope.abs() <= cfg.refine_tol * slope0.abs()
        || !(curve > 0.0);
    if skip {
        return Ok(Search::Found(found));
    }
    let alpha = found.alpha * -slope0 / curve;
    if !(alpha.is_finite() && alpha > 0.0) || alpha == found.alpha {
        return Ok(Search::Found(found));
    }
    let cur = ev.probe(x, d, alpha)?;
    let wolfe = cur.f <= f0 + cfg.wolfe_c1 * cur.alpha * slope0
        && cur.slope.abs() <= -cfg.wolfe_c2 * slope0;
    Ok(Search::Found(if wolfe && cur.f < found.f {
        cur
    } else {
        found
    }))
}

/// Strong-Wolfe search along `d` from `(x, f0, slope0)`.
fn line_search<F>(
    ev: &mut Evaluator<'_, F>,
    x: &Array1<f64>,
    f0: f64,
    g0: &Array1<f64>,
    d: &Array1<f64>,
    cfg: &LbfgsConfig,
) -> Result<Search>
where
    F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>)>,
{
    let slope0 = g0.dot(d);
    let armijo = |p: &Probe| p.f <= f0 + cfg.wolfe_c1 * p.alpha * slope0;
    let curvature = |p: &Probe| p.slope.abs() <= -cfg.wolfe_c2 * slope0;

    let mut budget = cfg.max_line_search_steps;
    let mut best: Option<Probe> = None;
    let keep_best = |best: &mut Option<Probe>, p: &Probe| {
        if p.f < f0 && best.as_ref().is_none_or(|b| p.f < b.f) {
            *best = Some(Probe {
                alpha: p.alpha,
                x: p.x.clone(),
                f: p.f,
                g: p.g.clone(),
                slope: p.slope,
            });
        }
    };

    let mut prev = Probe {
        alpha: 0.0,
        x: x.clone(),
        f: f0,
        g: g0.clone(),
        slope: slope0,
    };
    let mut alpha = 1.0;
    let mut first = true;
    let (mut lo, mut hi) = loop {
        if budget == 0 {
            return Ok(Search::Failed(best));
        }
        budget -= 1;
        let cur = ev.probe(x, d, alpha)?;
        keep_best(&mut best, &cur);
        if !armijo(&cur) || (!first && cur.f >= prev.f) {
            break (prev, cur);
        }
        if curvature(&cur) {
            return refine(ev, x, d, f0, slope0, cur, budget, cfg);
        }
        if cur.slope >= 0.0 {
            break (cur, prev);
        }
        alpha = cur.alpha * 2.0;
        prev = cur;
        first = false;
    };

    // zoom: `lo` satisfies sufficient decrease with the lowest value so far,
    // and the minimizer lies between `lo` and `hi`.
    while budget > 0 {
        if (hi.alpha - lo.alpha).abs() <= f64::EPSILON * lo.alpha.abs().max(hi.alpha.abs()) {
            break;
        }
        budget -= 1;
        let trial = cubic_step(&lo, &hi);
        let cur = ev.probe(x, d, trial)?;
        keep_best(&mut best, &cur);
        if !armijo(&cur) || cur.f >= lo.f {
            hi = cur;
        } else {
            if curvature(&cur) {
                return refine(ev, x, d, f0, slope0, cur, budget, cfg);
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    Ok(Search::Failed(best))
}

/// Minimizes `f` from `x0`. The oracle returns `(f(x), ∇f(x))`.
pub fn minimize<F>(
    mut oracle: F,
    x0: Array1<f64>,
    cfg: &LbfgsConfig,
) -> Result<(Array1<f64>, LbfgsReport)>
where
    F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>)>,
{
    cfg.validate()?;
    let mut ev = Evaluator {
        oracle: &mut oracle,
        evals: 0,
    };
    let mut x = x0;
    let (mut f, mut g) = ev.eval(&x)?;
    let mut pairs: VecDeque<Pair> = VecDeque::with_capacity(cfg.memory);
    let mut values = vec![f];
    let mut steps = Vec::new();
    let mut resets = 0;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        if inf_norm(&g) <= cfg.grad_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        let mut d = two_loop(&g, &pairs);
        if !(d.dot(&g) < 0.0) {
            d = -&g;
            pairs.clear();
            resets += 1;
        }
        let slope0 = g.dot(&d);
        match line_search(&mut ev, &x, f, &g, &d, cfg)? {
            Search::Found(p) => {
                steps.push(StepRecord {
                    alpha: p.alpha,
                    f0: f,
                    slope0,
                    f1: p.f,
                    slope1: p.slope,
                });
                let s = &p.x - &x;
                let y = &p.g - &g;
                let sy = s.dot(&y);
                if cfg.memory > 0 && sy > 1e-12 * s.dot(&s).sqrt() * y.dot(&y).sqrt() {
                    if pairs.len() == cfg.memory {
                        pairs.pop_front();
                    }
                    pairs.push_back(Pair {
                        s,
                        y,
                        rho: 1.0 / sy,
                    });
                }
                x = p.x;
                f = p.f;
                g = p.g;
                iterations += 1;
                values.push(f);
            }
            Search::Failed(best) => {
                if let Some(p) = best {
                    x = p.x;
                    f = p.f;
                    g = p.g;
                    iterations += 1;
                    values.push(f);
                }
                termination = Termination::LineSearchFailed;
                break;
            }
        }
    }
    if termination == Termination::MaxIterations && inf_norm(&g) <= cfg.grad_tol {
        termination = Termination::GradientTolerance;
    }
    let evals = ev.evals;
    Ok((
        x,
        LbfgsReport {
            iterations,
            values,
            grad_evals: evals,
            value_evals: evals,
            termination,
            final_grad_inf: inf_norm(&g),
            steps,
            direction_resets: resets,
        },
    ))
}
