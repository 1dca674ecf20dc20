//! Full-batch optimisers: L-BFGS with a strong-Wolfe line search, and Adam.

use std::collections::VecDeque;

use crate::error::{Error, Result};

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect()
}

/// Limited-memory inverse-Hessian approximation.
#[derive(Debug, Clone)]
pub struct Lbfgs {
    capacity: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

impl Lbfgs {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            pairs: VecDeque::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn reset(&mut self) {
        self.pairs.clear();
    }

    /// Stores a curvature pair; pairs with `sᵀy ≤ 0` are skipped.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if sy <= 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() || sy <= 0.0 {
            return;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// `−H g` by the two-loop recursion.
    pub fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = g.iter().map(|x| -x).collect();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|x| *x *= gamma);
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q
    }
}

#[derive(Debug, Clone)]
pub struct LineSearchResult {
    pub alpha: f64,
    pub x: Vec<f64>,
    pub f: f64,
    pub g: Vec<f64>,
    pub evaluations: usize,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_EVALS: usize = 30;

/// Minimiser of the cubic through `(a, fa, da)` and `(b, fb, db)`, if any.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    t.is_finite().then_some(t)
}

/// Line search satisfying the strong Wolfe conditions along `d`
/// (Nocedal & Wright, Algorithms 3.5 and 3.6).
pub fn strong_wolfe(
    f: &mut impl FnMut(&[f64]) -> (f64, Vec<f64>),
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    alpha0: f64,
) -> Result<LineSearchResult> {
    let d0 = dot(g0, d);
    if !(d0 < 0.0) {
        return Err(Error::LineSearchFailure);
    }
    let mut evals = 0;
    let mut eval = |alpha: f64| {
        let xa = axpy(x, alpha, d);
        let (fa, ga) = f(&xa);
        let da = dot(&ga, d);
        // treat non-finite values as "too far" so the bracket shrinks
        let fa = if fa.is_finite() { fa } else { f64::INFINITY };
        (xa, fa, ga, da)
    };

    let (mut a_prev, mut f_prev, mut d_prev) = (0.0, f0, d0);
    let mut alpha = alpha0;
    let mut bracket = None;
    while evals < MAX_EVALS {
        let (xa, fa, ga, da) = eval(alpha);
        evals += 1;
        if fa > f0 + C1 * alpha * d0 || (evals > 1 && fa >= f_prev) {
            bracket = Some((a_prev, f_prev, d_prev, alpha, fa, da));
            break;
        }
        if da.abs() <= -C2 * d0 {
            return Ok(LineSearchResult {
                alpha,
                x: xa,
                f: fa,
                g: ga,
                evaluations: evals,
            });
        }
        if da >= 0.0 {
            bracket = Some((alpha, fa, da, a_prev, f_prev, d_prev));
            break;
        }
        (a_prev, f_prev, d_prev) = (alpha, fa, da);
        alpha *= 2.0;
    }
    let Some((mut lo, mut f_lo, mut d_lo, mut hi, mut f_hi, mut d_hi)) = bracket else {
        return Err(Error::LineSearchFailure);
    };

    while evals < MAX_EVALS {
        let width = hi - lo;
        let safe = |t: f64| {
            let (a, b) = if lo < hi { (lo, hi) } else { (hi, lo) };
            let margin = 0.1 * (b - a);
            t > a + margin && t < b - margin
        };
        let trial = if f_hi.is_finite() {
            cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi).filter(|&t| safe(t))
        } else {
            None
        };
        let alpha = trial.unwrap_or(lo + 0.5 * width);
        if width.abs() <= 1e-16 * alpha.abs().max(1.0) {
            break;
        }
        let (xa, fa, ga, da) = eval(alpha);
        evals += 1;
        if fa > f0 + C1 * alpha * d0 || fa >= f_lo {
            (hi, f_hi, d_hi) = (alpha, fa, da);
        } else {
            if da.abs() <= -C2 * d0 {
                return Ok(LineSearchResult {
                    alpha,
                    x: xa,
                    f: fa,
                    g: ga,
                    evaluations: evals,
                });
            }
            if da * (hi - lo) >= 0.0 {
                (hi, f_hi, d_hi) = (lo, f_lo, d_lo);
            }
            (lo, f_lo, d_lo) = (alpha, fa, da);
        }
    }
    Err(Error::LineSearchFailure)
}

/// Adam with the usual defaults apart from the learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
            x[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}
