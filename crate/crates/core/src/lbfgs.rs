//! Unbounded limited-memory BFGS: two-loop recursion for the search
//! direction, strong-Wolfe line search with cubic interpolation.
//!
//! Cost and gradient are requested separately so that line-search trials that
//! fail the sufficient-decrease test cost a forward sweep only. Every call made
//! to the objective is counted in the report.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{norm_inf, Vector};

/// Objective function with separately requested gradient.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&mut self, x: &Vector) -> Result<f64>;

    /// Gradient at `x`. Usually called right after `value(x)`, which lets
    /// implementations reuse the forward sweep.
    fn gradient(&mut self, x: &Vector) -> Result<Vector>;

    /// Optional problem-specific scalar attached to the most recent `value`
    /// evaluation and copied into the iteration trace.
    fn diagnostic(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub memory: usize,
    /// Stop when `||∇f||_∞ <= grad_tol`.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Budget on cost evaluations.
    pub max_evals: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            grad_tol: 1e-6,
            max_iters: 1000,
            max_evals: 5000,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 30,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory < 1 {
            return Err(Error::InvalidConfig("memory >= 1".into()));
        }
        if !(self.c1 > 0.0 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "0 < c1 < c2 < 1 violated (c1 = {}, c2 = {})",
                self.c1, self.c2
            )));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidConfig("grad_tol > 0".into()));
        }
        if self.max_evals < 1 || self.max_line_search < 1 {
            return Err(Error::InvalidConfig(
                "max_evals >= 1 and max_line_search >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    GradientTolerance,
    MaxIterations,
    MaxEvaluations,
    LineSearchFailed,
}

/// Accepted iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub cost_evals: usize,
    pub grad_evals: usize,
    pub elapsed_s: f64,
    pub diagnostic: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub x_final: Vec<f64>,
    pub f_final: f64,
    /// `||∇f||_∞` at `x_final`.
    pub grad_norm_final: f64,
    pub iterations: usize,
    pub cost_evals: usize,
    pub grad_evals: usize,
    pub trace: Vec<IterationRecord>,
    pub wall_time_s: f64,
    pub termination: TerminationReason,
}

impl SolveReport {
    pub fn x(&self) -> Vector {
        Vector::from_column_slice(&self.x_final)
    }
}

struct Counted<'a, O: Objective + ?Sized> {
    inner: &'a mut O,
    cost_evals: usize,
    grad_evals: usize,
}

impl<O: Objective + ?Sized> Counted<'_, O> {
    fn value(&mut self, x: &Vector) -> Result<(f64, Option<f64>)> {
        self.cost_evals += 1;
        let f = self.inner.value(x)?;
        Ok((f, self.inner.diagnostic()))
    }

    fn gradient(&mut self, x: &Vector) -> Result<Vector> {
        self.grad_evals += 1;
        let g = self.inner.gradient(x)?;
        check_dim("objective gradient", x.len(), g.len())?;
        Ok(g)
    }
}

#[derive(Clone)]
struct Point {
    alpha: f64,
    x: Vector,
    f: f64,
    diag: Option<f64>,
    /// Gradient and directional derivative, once evaluated.
    grad: Option<(Vector, f64)>,
}

enum LineSearch {
    Accepted(Point),
    Failed,
    Budget,
}

/// Minimize `obj` from `x_init`.
pub fn minimize<O: Objective + ?Sized>(
    obj: &mut O,
    x_init: &Vector,
    cfg: &OptimizerConfig,
) -> Result<SolveReport> {
    cfg.validate()?;
    check_dim("minimize initial point", obj.dim(), x_init.len())?;
    let started = Instant::now();
    let mut f = Counted {
        inner: obj,
        cost_evals: 0,
        grad_evals: 0,
    };

    let mut x = x_init.clone();
    let (mut fx, mut diag) = f.value(&x)?;
    if !fx.is_finite() {
        return Err(Error::NonFinite("objective at initial point"));
    }
    let mut g = f.gradient(&x)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient at initial point"));
    }

    let mut memory: VecDeque<(Vector, Vector, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut trace = Vec::new();
    let mut iteration = 0;
    let record = |iteration: usize, fx: f64, g: &Vector, diag: Option<f64>, c: usize, gr: usize| {
        IterationRecord {
            iteration,
            cost: fx,
            grad_norm: norm_inf(g),
            cost_evals: c,
            grad_evals: gr,
            elapsed_s: started.elapsed().as_secs_f64(),
            diagnostic: diag,
        }
    };
    trace.push(record(0, fx, &g, diag, f.cost_evals, f.grad_evals));

    let termination = loop {
        if norm_inf(&g) <= cfg.grad_tol {
            break TerminationReason::GradientTolerance;
        }
        if iteration >= cfg.max_iters {
            break TerminationReason::MaxIterations;
        }
        if f.cost_evals >= cfg.max_evals {
            break TerminationReason::MaxEvaluations;
        }

        let mut restarted = false;
        let outcome = loop {
            let mut d = -two_loop(&memory, &g);
            let mut slope = g.dot(&d);
            if !(slope < 0.0) {
                memory.clear();
                d = -g.clone();
                slope = g.dot(&d);
            }
            let alpha0 = if memory.is_empty() {
                (1.0 / g.norm()).min(1.0)
            } else {
                1.0
            };
            match strong_wolfe(&mut f, cfg, &x, fx, &d, slope, alpha0)? {
                LineSearch::Failed if !memory.is_empty() && !restarted => {
                    memory.clear();
                    restarted = true;
                }
                other => break other,
            }
        };

        let p = match outcome {
            LineSearch::Accepted(p) => p,
            LineSearch::Failed => break TerminationReason::LineSearchFailed,
            LineSearch::Budget => break TerminationReason::MaxEvaluations,
        };
        let (g_new, _) = p.grad.expect("accepted points carry a gradient");
        let s = &p.x - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if memory.len() == cfg.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        x = p.x;
        fx = p.f;
        g = g_new;
        diag = p.diag;
        iteration += 1;
        trace.push(record(iteration, fx, &g, diag, f.cost_evals, f.grad_evals));
    };

    Ok(SolveReport {
        grad_norm_final: norm_inf(&g),
        x_final: x.iter().copied().collect(),
        f_final: fx,
        iterations: iteration,
        cost_evals: f.cost_evals,
        grad_evals: f.grad_evals,
        trace,
        wall_time_s: started.elapsed().as_secs_f64(),
        termination,
    })
}

/// `H g` with the L-BFGS inverse-Hessian approximation, initial scaling
/// `γ = sᵀy / yᵀy` from the newest pair.
fn two_loop(memory: &VecDeque<(Vector, Vector, f64)>, g: &Vector) -> Vector {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((_, y, rho)) = memory.back() {
        q *= 1.0 / (rho * y.dot(y));
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    q
}

fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let denom = db - da + 2.0 * d2;
    if denom == 0.0 {
        return None;
    }
    let t = b - (b - a) * (db + d2 - d1) / denom;
    t.is_finite().then_some(t)
}

fn quadratic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64) -> Option<f64> {
    let w = b - a;
    let curv = fb - fa - da * w;
    if !(curv > 0.0) {
        return None;
    }
    let t = a - da * w * w / (2.0 * curv);
    t.is_finite().then_some(t)
}

fn strong_wolfe<O: Objective + ?Sized>(
    f: &mut Counted<'_, O>,
    cfg: &OptimizerConfig,
    x: &Vector,
    f0: f64,
    d: &Vector,
    slope0: f64,
    alpha0: f64,
) -> Result<LineSearch> {
    const ALPHA_MAX: f64 = 1e10;
    let eval = |f: &mut Counted<'_, O>, alpha: f64| -> Result<Point> {
        let xa = x + d * alpha;
        let (fa, diag) = f.value(&xa)?;
        Ok(Point {
            alpha,
            x: xa,
            f: if fa.is_nan() { f64::INFINITY } else { fa },
            diag,
            grad: None,
        })
    };
    let with_grad = |f: &mut Counted<'_, O>, mut p: Point| -> Result<Point> {
        let g = f.gradient(&p.x)?;
        let s = g.dot(d);
        p.grad = Some((g, s));
        Ok(p)
    };

    let origin = Point {
        alpha: 0.0,
        x: x.clone(),
        f: f0,
        diag: None,
        grad: Some((Vector::zeros(0), slope0)),
    };
    let mut prev = origin.clone();
    let mut alpha = alpha0;
    let mut evals = 0;

    let (lo, hi) = loop {
        if f.cost_evals >= cfg.max_evals {
            return Ok(LineSearch::Budget);
        }
        evals += 1;
        let p = eval(f, alpha)?;
        if p.f > f0 + cfg.c1 * alpha * slope0 || (prev.alpha > 0.0 && p.f >= prev.f) {
            break (prev, p);
        }
        let p = with_grad(f, p)?;
        let dphi = p.grad.as_ref().unwrap().1;
        if dphi.abs() <= -cfg.c2 * slope0 {
            return Ok(LineSearch::Accepted(p));
        }
        if dphi >= 0.0 {
            break (p, prev);
        }
        if evals >= cfg.max_line_search || alpha >= ALPHA_MAX {
            return Ok(LineSearch::Accepted(p));
        }
        let next = (4.0 * alpha).min(ALPHA_MAX);
        prev = p;
        alpha = next;
    };

    zoom(f, cfg, f0, slope0, lo, hi, evals, &eval, &with_grad)
}

#[allow(clippy::too_many_arguments)]
fn zoom<O: Objective + ?Sized>(
    f: &mut Counted<'_, O>,
    cfg: &OptimizerConfig,
    f0: f64,
    slope0: f64,
    mut lo: Point,
    mut hi: Point,
    mut evals: usize,
    eval: &dyn Fn(&mut Counted<'_, O>, f64) -> Result<Point>,
    with_grad: &dyn Fn(&mut Counted<'_, O>, Point) -> Result<Point>,
) -> Result<LineSearch> {
    let fallback = |lo: Point| {
        if lo.alpha > 0.0 {
            LineSearch::Accepted(lo)
        } else {
            LineSearch::Failed
        }
    };
    loop {
        if evals >= cfg.max_line_search {
            return Ok(fallback(lo));
        }
        if f.cost_evals >= cfg.max_evals {
            return Ok(if lo.alpha > 0.0 {
                LineSearch::Accepted(lo)
            } else {
                LineSearch::Budget
            });
        }
        let (a, b) = (lo.alpha, hi.alpha);
        let width = (b - a).abs();
        if width <= f64::EPSILON * a.abs().max(b.abs()).max(f64::MIN_POSITIVE) {
            return Ok(fallback(lo));
        }
        let dlo = lo.grad.as_ref().unwrap().1;
        let trial = match &hi.grad {
            Some((_, dhi)) if hi.f.is_finite() => cubic_min(a, lo.f, dlo, b, hi.f, *dhi),
            _ if hi.f.is_finite() => quadratic_min(a, lo.f, dlo, b, hi.f),
            _ => None,
        };
        let (left, right) = (a.min(b), a.max(b));
        let mid = 0.5 * (a + b);
        let alpha = match trial {
            Some(t) if t > left + 0.1 * width && t < right - 0.1 * width => t,
            Some(t) => t.clamp(left + 0.1 * width, right - 0.1 * width),
            None => mid,
        };
        evals += 1;
        let p = eval(f, alpha)?;
        if p.f > f0 + cfg.c1 * alpha * slope0 || p.f >= lo.f {
            hi = p;
            continue;
        }
        let p = with_grad(f, p)?;
        let dphi = p.grad.as_ref().unwrap().1;
        if dphi.abs() <= -cfg.c2 * slope0 {
            return Ok(LineSearch::Accepted(p));
        }
        if dphi * (hi.alpha - lo.alpha) >= 0.0 {
            hi = lo;
        }
        lo = p;
    }
}
