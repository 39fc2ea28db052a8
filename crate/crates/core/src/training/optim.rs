//! Adam and L-BFGS on flat parameter vectors.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// Adam step sizes and decays.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// In-place bias-corrected Adam update.
pub fn adam_update(params: &mut [f64], grad: &[f64], state: &mut AdamState, hp: &AdamParams) {
    if state.m.len() != params.len() {
        *state = AdamState::new(params.len());
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for k in 0..params.len() {
        let g = grad[k];
        state.m[k] = hp.beta1 * state.m[k] + (1.0 - hp.beta1) * g;
        state.v[k] = hp.beta2 * state.v[k] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        params[k] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// `adam_step(params, grad, state, lr, beta1, beta2, eps)`.
pub fn adam_step(
    params: &[f64],
    grad: &[f64],
    state: &AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> (Vec<f64>, AdamState) {
    let mut p = params.to_vec();
    let mut s = state.clone();
    adam_update(&mut p, grad, &mut s, &AdamParams { lr, beta1, beta2, eps });
    (p, s)
}

/// How an optimisation phase ended.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
    Aborted(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { memory: 10, tolerance: 1e-16, max_iterations: 5000, c1: 1e-4, c2: 0.9, max_line_search: 30 }
    }
}

/// Result of [`lbfgs_minimize`]. `trace` holds the auxiliary output at each
/// accepted iterate, so its length equals `iterations`.
#[derive(Clone, Debug)]
pub struct LbfgsResult<A> {
    pub params: Vec<f64>,
    pub loss: f64,
    pub trace: Vec<A>,
    pub status: OptimStatus,
    pub iterations: usize,
    pub evaluations: usize,
}

struct Point<A> {
    f: f64,
    g: Vec<f64>,
    aux: Option<A>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Objective<'f, A, F> {
    f: &'f mut F,
    evaluations: usize,
    _aux: std::marker::PhantomData<A>,
}

impl<A, F> Objective<'_, A, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>, A)>,
{
    /// Overflow during a trial step reads as an infinite loss so the line
    /// search backs off.
    fn eval(&mut self, x: &[f64]) -> Result<Point<A>> {
        self.evaluations += 1;
        match (self.f)(x) {
            Ok((f, g, aux)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => Ok(Point { f, g, aux: Some(aux) }),
            Ok(_) | Err(Error::NumericOverflow { .. }) => {
                Ok(Point { f: f64::INFINITY, g: vec![f64::NAN; x.len()], aux: None })
            }
            Err(e) => Err(e),
        }
    }
}

/// Minimiser of the cubic through `(a, fa, da)` and `(b, fb, db)`, kept
/// inside the middle 80% of the bracket; bisection when the cubic fails.
fn cubic_step(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let (lo, hi) = (a.min(b), a.max(b));
    let margin = 0.1 * (hi - lo);
    let mid = 0.5 * (a + b);
    if !(fa.is_finite() && fb.is_finite() && da.is_finite() && db.is_finite()) {
        return mid;
    }
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    if t.is_finite() && t >= lo + margin && t <= hi - margin {
        t
    } else {
        mid
    }
}

enum Search<A> {
    Found(f64, Point<A>),
    /// Sufficient decrease without the curvature condition.
    Armijo(f64, Point<A>),
    Failed,
}

/// Strong-Wolfe line search (bracketing then zoom).
fn line_search<A, F>(
    obj: &mut Objective<'_, A, F>,
    x: &[f64],
    d: &[f64],
    f0: f64,
    dphi0: f64,
    a_init: f64,
    cfg: &LbfgsConfig,
) -> Result<Search<A>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>, A)>,
{
    let trial = |a: f64| -> Vec<f64> { x.iter().zip(d).map(|(xi, di)| xi + a * di).collect() };
    let armijo = |a: f64, f: f64| f <= f0 + cfg.c1 * a * dphi0;
    let curvature = |dphi: f64| dphi.abs() <= -cfg.c2 * dphi0;
    let mut best: Option<(f64, Point<A>)> = None;
    let keep_best = |a: f64, p: Point<A>, best: &mut Option<(f64, Point<A>)>| {
        if armijo(a, p.f) && best.as_ref().is_none_or(|(_, b)| p.f < b.f) {
            *best = Some((a, p));
        }
    };

    let (mut a_prev, mut f_prev, mut d_prev) = (0.0, f0, dphi0);
    let mut a = a_init;
    let mut bracket = None;
    for i in 0..cfg.max_line_search {
        let p = obj.eval(&trial(a))?;
        let dphi = if p.f.is_finite() { dot(&p.g, d) } else { f64::NAN };
        if !armijo(a, p.f) || (i > 0 && p.f >= f_prev) {
            bracket = Some(((a_prev, f_prev, d_prev), (a, p.f, dphi)));
            break;
        }
        if curvature(dphi) {
            return Ok(Search::Found(a, p));
        }
        if dphi >= 0.0 {
            bracket = Some(((a, p.f, dphi), (a_prev, f_prev, d_prev)));
            keep_best(a, p, &mut best);
            break;
        }
        a_prev = a;
        f_prev = p.f;
        d_prev = dphi;
        keep_best(a, p, &mut best);
        a *= 2.0;
    }

    if let Some((mut lo, mut hi)) = bracket {
        for _ in 0..cfg.max_line_search {
            let a = cubic_step(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2);
            if (hi.0 - lo.0).abs() <= 1e-16 * lo.0.abs().max(1e-16) {
                break;
            }
            let p = obj.eval(&trial(a))?;
            let dphi = if p.f.is_finite() { dot(&p.g, d) } else { f64::NAN };
            if !armijo(a, p.f) || p.f >= lo.1 {
                hi = (a, p.f, dphi);
            } else {
                if curvature(dphi) {
                    return Ok(Search::Found(a, p));
                }
                if dphi * (hi.0 - lo.0) >= 0.0 {
                    hi = lo;
                }
                lo = (a, p.f, dphi);
                keep_best(a, p, &mut best);
            }
        }
    }
    Ok(match best {
        Some((a, p)) => Search::Armijo(a, p),
        None => Search::Failed,
    })
}

/// `lbfgs_minimize(loss_builder, params0, config)`.
///
/// `f` returns the loss, its gradient, and auxiliary data recorded per
/// iteration. Stops when `|f_k - f_{k-1}| <= tolerance`, at
/// `max_iterations`, or with [`OptimStatus::LineSearchFailed`] when no step
/// gives sufficient decrease.
pub fn lbfgs_minimize<A, F>(mut f: F, params0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult<A>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>, A)>,
{
    let mut obj = Objective { f: &mut f, evaluations: 0, _aux: std::marker::PhantomData };
    let mut x = params0.to_vec();
    let start = obj.eval(&x)?;
    if !start.f.is_finite() {
        return Err(Error::NumericOverflow { node: 0, op: "initial loss" });
    }
    let (mut fx, mut g) = (start.f, start.g);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut trace = Vec::new();
    let mut status = OptimStatus::MaxIterations;
    let mut iterations = 0;

    if g.iter().all(|&v| v == 0.0) {
        status = OptimStatus::Converged;
    }
    while status == OptimStatus::MaxIterations && iterations < cfg.max_iterations {
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut dphi0 = dot(&g, &d);
        if !(dphi0 < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            dphi0 = dot(&g, &d);
        }
        let a_init = if history.is_empty() { (1.0 / g.iter().map(|v| v.abs()).sum::<f64>()).min(1.0) } else { 1.0 };

        let (a, p) = match line_search(&mut obj, &x, &d, fx, dphi0, a_init, cfg)? {
            Search::Found(a, p) | Search::Armijo(a, p) => (a, p),
            Search::Failed => {
                status = OptimStatus::LineSearchFailed;
                break;
            }
        };
        let s: Vec<f64> = d.iter().map(|v| a * v).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(n, o)| n - o).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            history.push_back((s.clone(), y, 1.0 / sy));
            if history.len() > cfg.memory {
                history.pop_front();
            }
        }
        x.iter_mut().zip(&s).for_each(|(xi, si)| *xi += si);
        let change = (p.f - fx).abs();
        fx = p.f;
        g = p.g;
        trace.push(p.aux.expect("finite point carries aux"));
        iterations += 1;
        if change <= cfg.tolerance || g.iter().all(|&v| v == 0.0) {
            status = OptimStatus::Converged;
        }
    }
    let evaluations = obj.evaluations;
    Ok(LbfgsResult { params: x, loss: fx, trace, status, iterations, evaluations })
}
