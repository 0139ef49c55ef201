//! Linear objectives over the simplex intersected with one MMD ball.
//!
//! ```text
//! min / max  v^T g   s.t.  g >= 0,  1^T g = 1,  q(g) = g^T K1 g - 2 h^T g + c <= eps^2
//! ```
//!
//! The problem is solved by a primal-dual interior-point method. Whatever the
//! iterate quality, the reported objective comes from a dual certificate: for
//! any multiplier `l >= 0` and any simplex point `g`, convexity of the
//! Lagrangian `f = v^T g + l (q(g) - eps^2)` gives
//!
//! ```text
//! min over the feasible set  >=  f(g) + min_i grad f(g)_i - grad f(g)^T g
//! ```
//!
//! so a minimization reports a lower bound and a maximization an upper bound.

use faer::{Mat, MatRef};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abstraction::AmbiguityData;
use crate::error::{Error, Result};
use crate::linalg::{self, Cholesky};

/// Coordinates at or below this are treated as active bounds by [`kkt_residual`].
pub const ACTIVE_TOL: f64 = 1e-7;

const MAX_ITER: usize = 200;
const STEP_FRACTION: f64 = 0.99;
/// Target average complementarity of the scaled problem.
const MU_TOL: f64 = 1e-12;
const MAX_NEWTON: usize = 50;
/// Centering stops when half the squared Newton decrement falls below this.
const NEWTON_TOL: f64 = 1e-10;
/// Centering that stalls in rounding is accepted below this decrement.
const STALL_TOL: f64 = 1e-6;
const MAX_OUTER: usize = 40;
const BARRIER_GROWTH: f64 = 20.0;
/// Path following continues until the central-path gap `(m + 1) / t` is below this.
const BARRIER_GAP: f64 = 1e-9;
/// KKT residual below which a stalled polishing Newton run is accepted; the
/// certificate is checked independently afterwards.
const POLISH_RESIDUAL: f64 = 1e-9;
/// Active-set polishing is attempted once the certified gap is below this.
const POLISH_FROM: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Min,
    Max,
}

#[derive(Clone, Copy, Debug)]
pub struct QclpProblem<'a> {
    pub values: &'a [f64],
    pub data: &'a AmbiguityData,
    pub sense: Sense,
    pub tol_obj: f64,
    pub tol_feas: f64,
}

impl<'a> QclpProblem<'a> {
    pub fn new(values: &'a [f64], data: &'a AmbiguityData, sense: Sense) -> Self {
        Self {
            values,
            data,
            sense,
            tol_obj: 1e-6,
            tol_feas: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    /// The interior-point iteration stopped on its budget, but the certificate
    /// gap is within `tol_obj`.
    BudgetExhaustedCertified,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QclpSolution {
    pub gamma: Vec<f64>,
    /// Certified bound: a lower bound for `Min`, an upper bound for `Max`.
    pub objective: f64,
    /// `v^T gamma` at the returned point.
    pub primal: f64,
    pub dual_lambda: f64,
    pub status: SolveStatus,
    pub iterations: usize,
}

/// Minimum of the quadratic form over the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct MinQuadratic {
    /// `q` at `gamma`, clamped at 0; an upper bound on the minimum.
    pub value: f64,
    /// Certified lower bound on the minimum, clamped at 0.
    pub lower: f64,
    pub gamma: Vec<f64>,
}

/// The quadratic divided by a positive scale.
struct Scaled<'a> {
    k1: MatRef<'a, f64>,
    inv: f64,
    h: Vec<f64>,
    c: f64,
}

impl<'a> Scaled<'a> {
    /// Scale `max diag K1`.
    fn new(data: &'a AmbiguityData) -> Self {
        let k1 = data.k1();
        let scale = (0..k1.nrows()).map(|i| k1[(i, i)]).fold(0.0, f64::max);
        Self::with_scale(data, scale)
    }

    /// Scale `eps^2`, so that the ball reads `q <= 1` (guarded for tiny radii).
    fn ball_units(data: &'a AmbiguityData) -> Self {
        let k1 = data.k1();
        let top = (0..k1.nrows()).map(|i| k1[(i, i)]).fold(0.0, f64::max);
        Self::with_scale(data, (data.eps() * data.eps()).max(1e-12 * top))
    }

    fn with_scale(data: &'a AmbiguityData, scale: f64) -> Self {
        let k1 = data.k1();
        let inv = 1.0 / scale.max(f64::MIN_POSITIVE);
        Self {
            k1: k1.as_ref(),
            inv,
            h: data.h().iter().map(|x| x * inv).collect(),
            c: data.const_term() * inv,
        }
    }

    fn dim(&self) -> usize {
        self.h.len()
    }

    /// `(K1 g) * inv`.
    fn k1_times(&self, g: &[f64]) -> Vec<f64> {
        let mut y = linalg::matvec(self.k1, g);
        for v in &mut y {
            *v *= self.inv;
        }
        y
    }

    /// `(q(g), grad q(g))`.
    fn eval(&self, g: &[f64]) -> (f64, Vec<f64>) {
        let kg = self.k1_times(g);
        let q = linalg::dot(g, &kg) - 2.0 * linalg::dot(&self.h, g) + self.c;
        let grad = kg.iter().zip(&self.h).map(|(a, b)| 2.0 * (a - b)).collect();
        (q, grad)
    }

    fn vertex_q(&self, i: usize) -> f64 {
        self.k1[(i, i)] * self.inv - 2.0 * self.h[i] + self.c
    }
}

/// Objective `v^T g + rho q(g)`, optionally subject to `q(g) <= ball`.
struct Program<'s, 'a> {
    quad: &'s Scaled<'a>,
    v: &'s [f64],
    rho: f64,
    ball: Option<f64>,
}

/// Best certified pair found along the iteration.
struct Certificate {
    gamma: Vec<f64>,
    primal: f64,
    lower: f64,
    lambda: f64,
}

impl Program<'_, '_> {
    /// Projects `g` onto the simplex by clipping and renormalizing, then returns
    /// the objective there, the dual bound at multiplier `lambda`, and whether
    /// the point satisfies the ball within `feas`.
    fn certify(&self, g: &[f64], lambda: f64, feas: f64) -> (Vec<f64>, f64, f64, bool) {
        let mut p: Vec<f64> = g.iter().map(|x| x.max(0.0)).collect();
        let s: f64 = p.iter().sum();
        if s > 0.0 {
            p.iter_mut().for_each(|x| *x /= s);
        } else {
            p.iter_mut().for_each(|x| *x = 1.0 / g.len() as f64);
        }
        let (q, grad_q) = self.quad.eval(&p);
        let lin = linalg::dot(self.v, &p);
        let primal = lin + self.rho * q;
        let lambda = lambda.max(0.0);
        let mult = self.rho + if self.ball.is_some() { lambda } else { 0.0 };
        let grad: Vec<f64> = self
            .v
            .iter()
            .zip(&grad_q)
            .map(|(a, b)| a + mult * b)
            .collect();
        let gmin = grad.iter().copied().fold(f64::INFINITY, f64::min);
        let f = primal + self.ball.map_or(0.0, |e| lambda * (q - e));
        let lower = f + gmin - linalg::dot(&grad, &p);
        let feasible = self.ball.is_none_or(|e| q <= e + feas);
        (p, primal, lower, feasible)
    }

    /// Mehrotra predictor-corrector from an infeasible interior start. Stops when
    /// the certified gap is below `tol` or after `max_iter` iterations.
    fn solve(&self, tol: f64, feas: f64, max_iter: usize) -> (Option<Certificate>, f64, usize) {
        let m = self.v.len();
        let n_comp = m as f64 + if self.ball.is_some() { 1.0 } else { 0.0 };
        let mut g = vec![1.0 / m as f64; m];
        let mut z = vec![1.0; m];
        let mut nu = 0.0;
        let mut lam = if self.ball.is_some() { 1.0 } else { 0.0 };
        let mut s = match self.ball {
            Some(e) => (e - self.quad.eval(&g).0).max(1.0),
            None => 1.0,
        };
        let mut best: Option<Certificate> = None;
        let mut best_lower = f64::NEG_INFINITY;
        let mut best_lambda = lam;
        let mut iterations = 0;

        for it in 0..max_iter {
            iterations = it;
            let (q, gq) = self.quad.eval(&g);
            let (p, primal, lower, feasible) = self.certify(&g, lam, feas);
            if lower > best_lower {
                best_lower = lower;
                best_lambda = lam;
            }
            if feasible && best.as_ref().is_none_or(|b| primal < b.primal) {
                best = Some(Certificate {
                    gamma: p,
                    primal,
                    lower,
                    lambda: lam,
                });
            }
            let mu =
                (linalg::dot(&g, &z) + if self.ball.is_some() { s * lam } else { 0.0 }) / n_comp;
            // keep going past a closed gap until complementarity is tight, so the
            // returned point has clean zeros off its support
            if let Some(b) = &best {
                if b.primal - best_lower <= tol && (mu <= MU_TOL || b.primal - best_lower <= 0.0) {
                    break;
                }
            }

            let mult = self.rho + lam;
            let rd: Vec<f64> = (0..m)
                .map(|i| self.v[i] + mult * gq[i] - z[i] + nu)
                .collect();
            let re = g.iter().sum::<f64>() - 1.0;
            let rq = self.ball.map_or(0.0, |e| q + s - e);
            log::trace!(
                "qclp it {it}: mu {mu:.3e} lambda {lam:.3e} primal {primal:.9} lower {lower:.9}"
            );

            // Newton matrix
            let mut mm = Mat::<f64>::from_fn(m, m, |i, j| {
                2.0 * mult * self.quad.k1[(i, j)] * self.quad.inv
            });
            for i in 0..m {
                mm[(i, i)] += z[i] / g[i];
            }
            if self.ball.is_some() {
                let w = lam / s;
                for j in 0..m {
                    for i in 0..m {
                        mm[(i, j)] += w * gq[i] * gq[j];
                    }
                }
            }
            let Some(chol) = factor_regularized(&mut mm) else {
                break;
            };
            let b = chol.solve_vec(&vec![1.0; m]);
            let sum_b: f64 = b.iter().sum();

            let direction = |comp_g: &[f64], comp_s: f64| {
                let mut rhs: Vec<f64> = (0..m).map(|i| -rd[i] + comp_g[i] / g[i]).collect();
                if self.ball.is_some() {
                    let t = (comp_s + lam * rq) / s;
                    for i in 0..m {
                        rhs[i] -= gq[i] * t;
                    }
                }
                let a = chol.solve_vec(&rhs);
                let dnu = (a.iter().sum::<f64>() + re) / sum_b;
                let dg: Vec<f64> = (0..m).map(|i| a[i] - b[i] * dnu).collect();
                let dz: Vec<f64> = (0..m).map(|i| (comp_g[i] - z[i] * dg[i]) / g[i]).collect();
                let (dl, ds) = if self.ball.is_some() {
                    let gd = linalg::dot(&gq, &dg);
                    ((comp_s + lam * rq) / s + lam / s * gd, -rq - gd)
                } else {
                    (0.0, 0.0)
                };
                (dg, dz, dnu, dl, ds)
            };
            let max_step = |dg: &[f64], dz: &[f64], dl: f64, ds: f64| {
                let mut alpha: f64 = 1.0;
                for i in 0..m {
                    if dg[i] < 0.0 {
                        alpha = alpha.min(-g[i] / dg[i]);
                    }
                    if dz[i] < 0.0 {
                        alpha = alpha.min(-z[i] / dz[i]);
                    }
                }
                if self.ball.is_some() {
                    if dl < 0.0 {
                        alpha = alpha.min(-lam / dl);
                    }
                    if ds < 0.0 {
                        alpha = alpha.min(-s / ds);
                    }
                }
                alpha
            };

            // predictor
            let comp_g: Vec<f64> = (0..m).map(|i| -g[i] * z[i]).collect();
            let (ag, az, _, al, as_) = direction(&comp_g, -s * lam);
            let alpha_aff = max_step(&ag, &az, al, as_);
            let mut mu_aff = 0.0;
            for i in 0..m {
                mu_aff += (g[i] + alpha_aff * ag[i]) * (z[i] + alpha_aff * az[i]);
            }
            if self.ball.is_some() {
                mu_aff += (s + alpha_aff * as_) * (lam + alpha_aff * al);
            }
            mu_aff /= n_comp;
            let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

            // corrector
            let comp_g: Vec<f64> = (0..m)
                .map(|i| sigma * mu - g[i] * z[i] - ag[i] * az[i])
                .collect();
            let comp_s = sigma * mu - s * lam - as_ * al;
            let (dg, dz, dnu, dl, ds) = direction(&comp_g, comp_s);
            let alpha = (STEP_FRACTION * max_step(&dg, &dz, dl, ds)).min(1.0);
            for i in 0..m {
                g[i] += alpha * dg[i];
                z[i] += alpha * dz[i];
            }
            nu += alpha * dnu;
            if self.ball.is_some() {
                lam += alpha * dl;
                s += alpha * ds;
            }
            if !(mu.is_finite() && alpha.is_finite()) || g.iter().any(|x| !x.is_finite()) {
                break;
            }
        }
        if let Some(b) = &mut best {
            b.lower = best_lower;
            b.lambda = best_lambda;
        }
        (best, best_lower, iterations)
    }
}

/// Outcome of [`barrier_solve`].
struct BarrierRun {
    cert: Option<Certificate>,
    lower: f64,
    newton_steps: usize,
    capped: bool,
}

/// Centers `t v^T g - sum ln g_i - ln(e - q(g))` on the simplex by Newton's
/// method with a feasibility-preserving backtracking search. Returns the
/// number of Newton steps and whether the decrement criterion was met.
fn center(prog: &Program<'_, '_>, e: f64, g: &mut [f64], t: f64) -> (usize, bool) {
    let m = g.len();
    let quad = prog.quad;
    let phi = |x: &[f64]| -> Option<f64> {
        let s = e - quad.eval(x).0;
        if !(s > 0.0) || x.iter().any(|&xi| !(xi > 0.0)) {
            return None;
        }
        Some(t * linalg::dot(prog.v, x) - x.iter().map(|xi| xi.ln()).sum::<f64>() - s.ln())
    };
    let mut steps = 0;
    let mut dec = f64::INFINITY;
    for _ in 0..MAX_NEWTON {
        let (q, gq) = quad.eval(g);
        let s = e - q;
        let grad: Vec<f64> = (0..m)
            .map(|i| t * prog.v[i] - 1.0 / g[i] + gq[i] / s)
            .collect();
        // Hessian scaled by diag(g) on both sides, so the barrier block is I
        let mut h = Mat::<f64>::from_fn(m, m, |i, j| {
            g[i] * g[j] * (2.0 * quad.k1[(i, j)] * quad.inv / s + gq[i] * gq[j] / (s * s))
        });
        for i in 0..m {
            h[(i, i)] += 1.0;
        }
        let Some(chol) = factor_regularized(&mut h) else {
            break;
        };
        let sg: Vec<f64> = (0..m).map(|i| g[i] * grad[i]).collect();
        let a: Vec<f64> = chol
            .solve_vec(&sg)
            .iter()
            .zip(g.iter())
            .map(|(x, gi)| x * gi)
            .collect();
        let b: Vec<f64> = chol
            .solve_vec(g)
            .iter()
            .zip(g.iter())
            .map(|(x, gi)| x * gi)
            .collect();
        let w = -a.iter().sum::<f64>() / b.iter().sum::<f64>();
        let dg: Vec<f64> = (0..m).map(|i| -(a[i] + w * b[i])).collect();
        let slope = linalg::dot(&grad, &dg);
        dec = -slope / 2.0;
        if dec <= NEWTON_TOL {
            return (steps, true);
        }
        let mut alpha: f64 = 1.0;
        for i in 0..m {
            if dg[i] < 0.0 {
                alpha = alpha.min(-STEP_FRACTION * g[i] / dg[i]);
            }
        }
        let Some(phi0) = phi(g) else { break };
        // rounding in `phi` is relative to its magnitude
        let slack = 1e-14 * phi0.abs().max(1.0);
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = (0..m).map(|i| g[i] + alpha * dg[i]).collect();
            if let Some(f) = phi(&trial).filter(|&f| f <= phi0 + 0.25 * alpha * slope + slack) {
                g.copy_from_slice(&trial);
                accepted = Some(f);
                break;
            }
            alpha *= 0.5;
        }
        steps += 1;
        match accepted {
            // progress lost in rounding: close enough to the center
            Some(f) if phi0 - f <= 10.0 * slack && dec <= STALL_TOL => return (steps, true),
            Some(_) => {}
            None => break,
        }
    }
    (steps, dec <= STALL_TOL)
}

/// Path following on the log barrier of the ball and the simplex from a
/// strictly feasible `start`. Every center is certified with the multiplier
/// `1 / (t (e - q))`; once the gap is small, centers are also polished on
/// their active set, which ends the path as soon as it yields an exact point.
fn barrier_solve(
    prog: &Program<'_, '_>,
    e: f64,
    start: Vec<f64>,
    tol: f64,
    feas: f64,
) -> BarrierRun {
    let m = start.len();
    let n = m as f64 + 1.0;
    let vmin = prog.v.iter().copied().fold(f64::INFINITY, f64::min);
    let vmax = prog.v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut t = n / (vmax - vmin).max(1e-12);
    let mut g = start;
    let mut best: Option<Certificate> = None;
    let mut best_lower = f64::NEG_INFINITY;
    let mut best_lambda = 0.0;
    let mut newton_steps = 0;
    let mut capped = true;
    let mut growth = BARRIER_GROWTH;
    let mut last_t: Option<f64> = None;
    for _ in 0..MAX_OUTER {
        let mut trial = g.clone();
        let (steps, ok) = center(prog, e, &mut trial, t);
        newton_steps += steps;
        if !ok {
            log::trace!("barrier t {t:.3e}: centering stalled");
            match last_t {
                // retry from the last center with a shorter step along the path
                Some(prev) if growth > 1.5 => {
                    growth = growth.sqrt();
                    t = prev * growth;
                    continue;
                }
                _ => break,
            }
        }
        last_t = Some(t);
        g = trial;
        let lam = 1.0 / (t * (e - prog.quad.eval(&g).0));
        let (p, primal, lower, feasible) = prog.certify(&g, lam, feas);
        if lower > best_lower {
            best_lower = lower;
            best_lambda = lam;
        }
        if feasible && best.as_ref().is_none_or(|b| primal < b.primal) {
            best = Some(Certificate {
                gamma: p,
                primal,
                lower,
                lambda: lam,
            });
        }
        let gap = best
            .as_ref()
            .map_or(f64::INFINITY, |b| b.primal - best_lower);
        log::trace!("barrier t {t:.3e}: gap {gap:.3e}");
        if gap <= POLISH_FROM {
            // an exact KKT point certifies itself and has clean zeros
            if let Some((gp, lam)) = polish(prog, e, &g, t, feas) {
                let (p, primal, lower, feasible) = prog.certify(&gp, lam, feas);
                if feasible && primal - lower <= tol {
                    best_lower = best_lower.max(lower);
                    best_lambda = lam;
                    best = Some(Certificate {
                        gamma: p,
                        primal,
                        lower,
                        lambda: lam,
                    });
                    capped = false;
                    break;
                }
            }
        }
        if gap <= tol && n / t <= BARRIER_GAP {
            capped = false;
            break;
        }
        t *= growth;
    }
    if let Some(b) = &mut best {
        b.lower = best_lower;
        b.lambda = best_lambda;
    }
    BarrierRun {
        cert: best,
        lower: best_lower,
        newton_steps,
        capped,
    }
}

/// Newton's method on the KKT equations restricted to the support read off a
/// barrier center at parameter `t`, with the ball taken as active and then as
/// inactive (in the likelier order first). Returns the point and multiplier
/// if they satisfy every KKT condition.
fn polish(
    prog: &Program<'_, '_>,
    e: f64,
    g0: &[f64],
    t: f64,
    feas: f64,
) -> Option<(Vec<f64>, f64)> {
    let m = g0.len();
    let cut = 1.0 / t.sqrt();
    let free: Vec<usize> = (0..m).filter(|&i| g0[i] >= cut).collect();
    if free.is_empty() {
        return None;
    }
    let s0 = e - prog.quad.eval(g0).0;
    let order = if s0 < cut {
        [true, false]
    } else {
        [false, true]
    };
    order
        .into_iter()
        .find_map(|active| polish_on(prog, e, g0, &free, active, 1.0 / (t * s0), feas))
}

fn polish_on(
    prog: &Program<'_, '_>,
    e: f64,
    g0: &[f64],
    free: &[usize],
    ball_active: bool,
    lam0: f64,
    feas: f64,
) -> Option<(Vec<f64>, f64)> {
    let m = g0.len();
    let quad = prog.quad;
    let mut free = free.to_vec();
    let mut g = vec![0.0; m];
    let mass: f64 = free.iter().map(|&i| g0[i]).sum();
    for &i in &free {
        g[i] = g0[i] / mass;
    }
    if !ball_active {
        // a face of the simplex on which the objective is flat
        let lo = free
            .iter()
            .map(|&i| prog.v[i])
            .fold(f64::INFINITY, f64::min);
        let hi = free
            .iter()
            .map(|&i| prog.v[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > 1e-12 {
            return None;
        }
        return kkt_holds(prog, e, &g, &free, 0.0, -lo, feas).then_some((g, 0.0));
    }
    let mut lam = lam0;
    let (_, gq) = quad.eval(&g);
    let f = free.len() as f64;
    let mut nu = -free.iter().map(|&i| prog.v[i] + lam * gq[i]).sum::<f64>() / f;
    // primal-dual active set: drop atoms that go negative, admit atoms whose
    // reduced cost is negative
    for _ in 0..2 * m {
        newton_kkt(prog, e, &mut g, &free, &mut lam, &mut nu)?;
        if lam < 0.0 {
            return None;
        }
        let neg: Vec<usize> = free.iter().copied().filter(|&i| g[i] <= 0.0).collect();
        if !neg.is_empty() {
            free.retain(|i| !neg.contains(i));
            if free.is_empty() {
                return None;
            }
            for &i in &neg {
                g[i] = 0.0;
            }
            let mass: f64 = free.iter().map(|&i| g[i]).sum();
            if !(mass > 0.0) {
                return None;
            }
            for &i in &free {
                g[i] /= mass;
            }
            continue;
        }
        let (_, gq) = quad.eval(&g);
        let worst = (0..m)
            .filter(|i| !free.contains(i))
            .map(|i| (i, prog.v[i] + lam * gq[i] + nu))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            Some((i, z)) if z < -1e-12 => {
                free.push(i);
                free.sort_unstable();
            }
            _ => return kkt_holds(prog, e, &g, &free, lam, nu, feas).then_some((g, lam)),
        }
    }
    None
}

/// Newton's method on stationarity, the simplex and the active ball with the
/// atoms outside `free` fixed at zero.
fn newton_kkt(
    prog: &Program<'_, '_>,
    e: f64,
    g: &mut [f64],
    free: &[usize],
    lam: &mut f64,
    nu: &mut f64,
) -> Option<()> {
    let quad = prog.quad;
    let f = free.len();
    let dim = f + 2;
    let mut best: Option<(f64, Vec<f64>, f64, f64)> = None;
    for _ in 0..30 {
        let (q, gq) = quad.eval(g);
        let mut r = vec![0.0; dim];
        for (k, &i) in free.iter().enumerate() {
            r[k] = prog.v[i] + *lam * gq[i] + *nu;
        }
        r[f] = free.iter().map(|&i| g[i]).sum::<f64>() - 1.0;
        r[f + 1] = q - e;
        let norm = r.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if norm <= 1e-13 * (1.0 + lam.abs()) {
            return Some(());
        }
        match &best {
            // stalled at the rounding floor
            Some((b, ..)) if norm > 0.5 * b && *b <= POLISH_RESIDUAL => break,
            Some((b, ..)) if norm >= *b => {}
            _ => best = Some((norm, g.to_vec(), *lam, *nu)),
        }
        // unknowns (g_F, lambda, nu); rows: stationarity, simplex, ball
        let jac = Mat::<f64>::from_fn(dim, dim, |a, b| match (a < f, b < f) {
            (true, true) => 2.0 * *lam * quad.k1[(free[a], free[b])] * quad.inv,
            (true, false) if b == f => gq[free[a]],
            (true, false) => 1.0,
            (false, true) if a == f => 1.0,
            (false, true) => gq[free[b]],
            (false, false) => 0.0,
        });
        let rhs: Vec<f64> = r.iter().map(|x| -x).collect();
        let d = linalg::solve_dense(&jac, &rhs);
        if d.iter().any(|x| !x.is_finite()) {
            return None;
        }
        for (k, &i) in free.iter().enumerate() {
            g[i] += d[k];
        }
        *lam += d[f];
        *nu += d[f + 1];
    }
    let (norm, gb, lb, nb) = best?;
    if norm > POLISH_RESIDUAL {
        return None;
    }
    g.copy_from_slice(&gb);
    *lam = lb;
    *nu = nb;
    Some(())
}

fn kkt_holds(
    prog: &Program<'_, '_>,
    e: f64,
    g: &[f64],
    free: &[usize],
    lam: f64,
    nu: f64,
    feas: f64,
) -> bool {
    let (q, gq) = prog.quad.eval(g);
    if free.iter().any(|&i| !(g[i] > 0.0)) || q > e + feas || lam < 0.0 {
        return false;
    }
    (0..g.len())
        .filter(|i| !free.contains(i))
        .all(|i| prog.v[i] + lam * gq[i] + nu >= -1e-12)
}

/// Cholesky of `mm`, adding a growing diagonal shift if it is numerically singular.
fn factor_regularized(mm: &mut Mat<f64>) -> Option<Cholesky> {
    let m = mm.nrows();
    let scale = (0..m)
        .map(|i| mm[(i, i)].abs())
        .fold(0.0, f64::max)
        .max(1.0);
    let mut shift = 0.0;
    for _ in 0..8 {
        if let Some(c) = Cholesky::factor(mm) {
            return Some(c);
        }
        let next = if shift == 0.0 {
            1e-14 * scale
        } else {
            shift * 100.0
        };
        for i in 0..m {
            mm[(i, i)] += next - shift;
        }
        shift = next;
    }
    None
}

fn validate(p: &QclpProblem<'_>) -> Result<()> {
    let m = p.data.n_atoms();
    if p.values.len() != m {
        return Err(Error::Input(format!(
            "value vector has length {} but the ambiguity set has {m} atoms",
            p.values.len()
        )));
    }
    if p.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite value vector".into()));
    }
    if !(p.tol_obj > 0.0 && p.tol_feas > 0.0) {
        return Err(Error::Input("solver tolerances must be > 0".into()));
    }
    Ok(())
}

pub fn solve(p: &QclpProblem<'_>) -> Result<QclpSolution> {
    validate(p)?;
    let m = p.values.len();
    let sign = match p.sense {
        Sense::Min => 1.0,
        Sense::Max => -1.0,
    };
    let v: Vec<f64> = p.values.iter().map(|x| sign * x).collect();
    let quad = Scaled::ball_units(p.data);
    let eps_sq = p.data.eps() * p.data.eps() * quad.inv;
    let feas = p.tol_feas * eps_sq.max(f64::MIN_POSITIVE);
    let vmin = v.iter().copied().fold(f64::INFINITY, f64::min);
    let vmax = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let finish = |gamma: Vec<f64>, lower: f64, lambda: f64, status, iterations| {
        let primal = linalg::dot(p.values, &gamma);
        let lower = lower.clamp(vmin, vmax);
        QclpSolution {
            gamma,
            objective: sign * lower,
            primal,
            dual_lambda: lambda * quad.inv,
            status,
            iterations,
        }
    };

    // lowest-index feasible vertex attaining min v: the ball is inactive
    for i in 0..m {
        if v[i] <= vmin + 1e-12 && quad.vertex_q(i) <= eps_sq {
            let mut g = vec![0.0; m];
            g[i] = 1.0;
            return Ok(finish(g, vmin, 0.0, SolveStatus::Optimal, 0));
        }
    }
    if vmax - vmin <= 1e-15 {
        let mq = p.data.min_quadratic();
        if mq.lower * quad.inv > eps_sq {
            return Err(Error::Infeasible {
                gap: mq.lower - p.data.eps() * p.data.eps(),
            });
        }
        return Ok(finish(mq.gamma.clone(), vmin, 0.0, SolveStatus::Optimal, 0));
    }

    let prog = Program {
        quad: &quad,
        v: &v,
        rho: 0.0,
        ball: Some(eps_sq),
    };
    let (cert, lower, iterations, capped) =
        match interior_start(&quad, p.data.min_quadratic(), eps_sq) {
            Some(start) => {
                let run = barrier_solve(&prog, eps_sq, start, 0.5 * p.tol_obj, feas);
                (run.cert, run.lower, run.newton_steps, run.capped)
            }
            None => {
                let (cert, lower, it) = prog.solve(0.5 * p.tol_obj, feas, MAX_ITER);
                (cert, lower, it, it + 1 >= MAX_ITER)
            }
        };
    match cert {
        Some(c) if c.primal - c.lower <= p.tol_obj => {
            let status = if capped {
                SolveStatus::BudgetExhaustedCertified
            } else {
                SolveStatus::Optimal
            };
            Ok(finish(c.gamma, c.lower, c.lambda, status, iterations))
        }
        _ => {
            let mq = p.data.min_quadratic();
            let e2 = p.data.eps() * p.data.eps();
            if mq.lower > e2 {
                return Err(Error::Infeasible { gap: mq.lower - e2 });
            }
            Err(Error::SolverBudget {
                iterations,
                bound: sign * lower.clamp(vmin, vmax),
            })
        }
    }
}

/// A point with positive coordinates well inside the ball, blended from the
/// minimizer of `q` and the uniform distribution; `None` if the ball has no
/// usable interior.
fn interior_start(quad: &Scaled<'_>, mq: &MinQuadratic, eps_sq: f64) -> Option<Vec<f64>> {
    let m = quad.dim();
    let q_min = quad.eval(&mq.gamma).0;
    if !(q_min < eps_sq) {
        return None;
    }
    let target = q_min + 0.5 * (eps_sq - q_min);
    let mut theta = 0.5;
    while theta > 1e-12 {
        let g: Vec<f64> = mq
            .gamma
            .iter()
            .map(|x| (1.0 - theta) * x + theta / m as f64)
            .collect();
        if quad.eval(&g).0 <= target {
            return Some(g);
        }
        theta *= 0.5;
    }
    None
}

/// Minimal squared MMD between a center-supported distribution and the target.
pub fn min_quadratic(data: &AmbiguityData) -> MinQuadratic {
    let quad = Scaled::new(data);
    let m = quad.dim();
    let scale = 1.0 / quad.inv;
    let zeros = vec![0.0; m];
    let prog = Program {
        quad: &quad,
        v: &zeros,
        rho: 1.0,
        ball: None,
    };
    // a vertex is optimal when the target is a center's embedding
    let (vi, vq) = (0..m)
        .map(|i| (i, quad.vertex_q(i)))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let (cert, _, _) = prog.solve(1e-13, 0.0, MAX_ITER);
    let (gamma, value, lower) = match cert {
        Some(c) if c.primal < vq => (c.gamma, c.primal, c.lower),
        Some(c) => {
            let mut g = vec![0.0; m];
            g[vi] = 1.0;
            (g, vq, c.lower)
        }
        None => {
            let mut g = vec![0.0; m];
            g[vi] = 1.0;
            (g, vq, 0.0)
        }
    };
    MinQuadratic {
        value: (value * scale).max(0.0),
        lower: (lower * scale).clamp(0.0, (value * scale).max(0.0)),
        gamma,
    }
}

/// Solves every problem, in parallel, returning results in input order.
pub fn solve_batch(problems: &[QclpProblem<'_>]) -> Vec<Result<QclpSolution>> {
    problems.par_iter().map(solve).collect()
}

/// Norm of the projection of `-(s v + lambda grad q)` onto the tangent cone of
/// the simplex at `gamma`, with `s = 1` for `Min` and `-1` for `Max`.
pub fn kkt_residual(p: &QclpProblem<'_>, sol: &QclpSolution) -> f64 {
    let sign = match p.sense {
        Sense::Min => 1.0,
        Sense::Max => -1.0,
    };
    let gq = p.data.grad_q(&sol.gamma);
    let g: Vec<f64> = p
        .values
        .iter()
        .zip(&gq)
        .map(|(v, d)| sign * v + sol.dual_lambda * d)
        .collect();
    let active: Vec<bool> = sol.gamma.iter().map(|&x| x <= ACTIVE_TOL).collect();
    let total = |nu: f64| -> f64 {
        g.iter()
            .zip(&active)
            .map(|(gi, &a)| if a { (nu - gi).max(0.0) } else { nu - gi })
            .sum()
    };
    let lo = g.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // `total` is nondecreasing; total(lo) <= 0 <= total(hi)
    let (mut a, mut b) = (lo, hi);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if total(mid) < 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    let nu = 0.5 * (a + b);
    g.iter()
        .zip(&active)
        .map(|(gi, &act)| {
            let d = if act { (nu - gi).max(0.0) } else { nu - gi };
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{FiniteMeasure, KernelParams, Points};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random_data(rng: &mut ChaCha8Rng, m: usize, eps_frac: f64) -> AmbiguityData {
        let k = KernelParams::new(rng.random_range(0.5..3.0), rng.random_range(0.3..1.5)).unwrap();
        let centers = Points::from_flat(
            1,
            (0..m)
                .map(|i| i as f64 * 0.7 + rng.random_range(0.0..0.3))
                .collect(),
        )
        .unwrap();
        let n = 6;
        let atoms =
            Points::from_flat(1, (0..n).map(|_| rng.random_range(-0.5..2.5)).collect()).unwrap();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-0.1..0.4)).collect();
        let target = FiniteMeasure::new(atoms, weights).unwrap();
        let k1 = Arc::new(crate::kernel::gram(&k, &centers, &centers).unwrap().entries);
        let probe = AmbiguityData::from_measure(&k, k1.clone(), &centers, &target, 0.0).unwrap();
        let qmin = min_quadratic(&probe).value;
        let qmax = (0..m)
            .map(|i| probe.quadratic(&unit(m, i)))
            .fold(0.0, f64::max);
        let eps = (qmin + eps_frac * (qmax - qmin)).sqrt();
        AmbiguityData::from_measure(&k, k1, &centers, &target, eps).unwrap()
    }

    fn unit(m: usize, i: usize) -> Vec<f64> {
        let mut g = vec![0.0; m];
        g[i] = 1.0;
        g
    }

    /// Dense centers and a wide kernel make `K1` badly conditioned, as on the
    /// benchmark grids.
    fn clustered_data(rng: &mut ChaCha8Rng, m: usize, eps_frac: f64) -> AmbiguityData {
        let k = KernelParams::new(10.0, 1.0).unwrap();
        let h = 6.0 / m as f64;
        let centers = Points::from_flat(1, (0..m).map(|i| (i as f64 + 0.5) * h).collect()).unwrap();
        let n = 30;
        let mid: f64 = rng.random_range(0.0..6.0);
        let atoms = Points::from_flat(
            1,
            (0..n)
                .map(|_| (mid + rng.random_range(-0.6..0.6_f64)).clamp(0.0, 6.0))
                .collect(),
        )
        .unwrap();
        let target = FiniteMeasure::new(atoms, vec![1.0 / n as f64; n]).unwrap();
        let k1 = Arc::new(crate::kernel::gram(&k, &centers, &centers).unwrap().entries);
        let probe = AmbiguityData::from_measure(&k, k1.clone(), &centers, &target, 0.0).unwrap();
        let qmin = min_quadratic(&probe).value;
        let eps = (qmin + eps_frac * 100.0).sqrt();
        AmbiguityData::from_measure(&k, k1, &centers, &target, eps).unwrap()
    }

    #[test]
    fn stress_clustered() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut worst_kkt: f64 = 0.0;
        let mut worst_gap: f64 = 0.0;
        let mut steps = 0;
        let mut count = 0;
        for trial in 0..120 {
            let m = [5, 12, 35, 60][trial % 4];
            let frac = [1e-4, 1e-3, 1e-2, 0.1][(trial / 4) % 4];
            let d = clustered_data(&mut rng, m, frac);
            let v: Vec<f64> = (0..m)
                .map(|_| match rng.random_range(0..4) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => rng.random_range(0.0..1.0),
                })
                .collect();
            for sense in [Sense::Min, Sense::Max] {
                let p = QclpProblem::new(&v, &d, sense);
                let sol =
                    solve(&p).unwrap_or_else(|e| panic!("trial {trial} m={m} frac={frac}: {e}"));
                let gap = match sense {
                    Sense::Min => sol.primal - sol.objective,
                    Sense::Max => sol.objective - sol.primal,
                };
                worst_gap = worst_gap.max(gap);
                worst_kkt = worst_kkt.max(kkt_residual(&p, &sol));
                steps += sol.iterations;
                count += 1;
            }
        }
        eprintln!(
            "worst gap {worst_gap:.3e} worst kkt {worst_kkt:.3e} mean steps {}",
            steps / count
        );
        assert!(worst_gap <= 1e-6);
    }

    #[test]
    fn large_ball_gives_vertex() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_data(&mut rng, 3, 5.0);
        let v = [0.3, 0.1, 0.1];
        let s = solve(&QclpProblem::new(&v, &d, Sense::Min)).unwrap();
        assert_eq!(s.objective, 0.1);
        assert_eq!(s.gamma, vec![0.0, 1.0, 0.0]);
        let s = solve(&QclpProblem::new(&v, &d, Sense::Max)).unwrap();
        assert_eq!(s.objective, 0.3);
    }

    #[test]
    fn constant_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_data(&mut rng, 4, 0.05);
        let v = [0.7; 4];
        for sense in [Sense::Min, Sense::Max] {
            let s = solve(&QclpProblem::new(&v, &d, sense)).unwrap();
            assert_eq!(s.objective, 0.7);
        }
    }

    #[test]
    fn min_quadratic_vertex_target() {
        let k = KernelParams::new(1.0, 1.0).unwrap();
        let centers = Points::from_rows(&[[0.0], [1.0], [2.5]]).unwrap();
        let k1 = Arc::new(crate::kernel::gram(&k, &centers, &centers).unwrap().entries);
        let target = FiniteMeasure::dirac(&[1.0]);
        let d = AmbiguityData::from_measure(&k, k1, &centers, &target, 0.1).unwrap();
        let mq = min_quadratic(&d);
        assert!(mq.value < 1e-10);
        assert!(mq.gamma[1] > 1.0 - 1e-6);
    }

    #[test]
    fn min_quadratic_matches_line_search() {
        let k = KernelParams::new(1.3, 0.8).unwrap();
        let centers = Points::from_rows(&[[0.0], [1.0]]).unwrap();
        let k1 = Arc::new(crate::kernel::gram(&k, &centers, &centers).unwrap().entries);
        let target = FiniteMeasure::new(
            Points::from_rows(&[[0.3], [0.9], [1.4]]).unwrap(),
            vec![0.2, 0.5, 0.4],
        )
        .unwrap();
        let d = AmbiguityData::from_measure(&k, k1, &centers, &target, 1.0).unwrap();
        let mut best = f64::INFINITY;
        for i in 0..=100_000 {
            let t = i as f64 * 1e-5;
            best = best.min(d.quadratic(&[t, 1.0 - t]));
        }
        let mq = min_quadratic(&d);
        assert!(mq.value >= 0.0);
        assert!((mq.value - best).abs() < 1e-9, "{} vs {best}", mq.value);
        assert!(mq.lower <= best + 1e-12);
    }

    #[test]
    fn infeasible_ball() {
        let k = KernelParams::new(1.0, 1.0).unwrap();
        let centers = Points::from_rows(&[[0.0], [1.0]]).unwrap();
        let k1 = Arc::new(crate::kernel::gram(&k, &centers, &centers).unwrap().entries);
        let target = FiniteMeasure::dirac(&[5.0]);
        let d = AmbiguityData::from_measure(&k, k1, &centers, &target, 0.1).unwrap();
        let err = solve(&QclpProblem::new(&[0.0, 1.0], &d, Sense::Min)).unwrap_err();
        assert!(matches!(err, Error::Infeasible { gap } if gap > 0.0));
    }

    fn brute_force(d: &AmbiguityData, v: &[f64], sense: Sense, res: usize) -> Option<f64> {
        let m = v.len();
        let e2 = d.eps() * d.eps();
        let mut best: Option<f64> = None;
        let mut push = |g: &[f64]| {
            if d.quadratic(g) <= e2 {
                let o = linalg::dot(v, g);
                best = Some(match (best, sense) {
                    (None, _) => o,
                    (Some(b), Sense::Min) => b.min(o),
                    (Some(b), Sense::Max) => b.max(o),
                });
            }
        };
        match m {
            2 => {
                for i in 0..=res {
                    let t = i as f64 / res as f64;
                    push(&[t, 1.0 - t]);
                }
            }
            3 => {
                for i in 0..=res {
                    for j in 0..=res - i {
                        let (a, b) = (i as f64 / res as f64, j as f64 / res as f64);
                        push(&[a, b, (1.0 - a - b).max(0.0)]);
                    }
                }
            }
            _ => unreachable!(),
        }
        best
    }

    #[test]
    fn agrees_with_simplex_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        for trial in 0..40 {
            let m = 2 + trial % 2;
            let frac = rng.random_range(0.02..0.6);
            let d = random_data(&mut rng, m, frac);
            let v: Vec<f64> = if m == 3 {
                vec![0.0, 0.4, 1.0]
            } else {
                vec![0.2, 0.9]
            };
            for sense in [Sense::Min, Sense::Max] {
                let p = QclpProblem::new(&v, &d, sense);
                let s = solve(&p).unwrap();
                if let Some(bf) = brute_force(&d, &v, sense, if m == 2 { 100_000 } else { 1000 }) {
                    assert!(
                        (s.objective - bf).abs() <= 2e-3,
                        "trial {trial} {sense:?}: {} vs {bf}",
                        s.objective
                    );
                    match sense {
                        Sense::Min => assert!(s.objective <= bf + 1e-9),
                        Sense::Max => assert!(s.objective >= bf - 1e-9),
                    }
                    checked += 1;
                }
                assert!(
                    kkt_residual(&p, &s) <= 1e-5,
                    "kkt {} {s:?} {:?}",
                    kkt_residual(&p, &s),
                    p.values
                );
                assert!(d.quadratic(&s.gamma) <= d.eps() * d.eps() * (1.0 + 1e-8) + 1e-14);
            }
        }
        assert!(checked > 60);
    }

    #[test]
    fn nested_balls_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = random_data(&mut rng, 4, 0.02);
        let v = [0.9, 0.1, 0.5, 0.3];
        let mut prev_min = f64::INFINITY;
        let mut prev_max = f64::NEG_INFINITY;
        for scale in [1.0, 1.2, 1.5, 2.0, 3.0] {
            let d = base.with_eps(base.eps() * scale);
            let lo = solve(&QclpProblem::new(&v, &d, Sense::Min))
                .unwrap()
                .objective;
            let hi = solve(&QclpProblem::new(&v, &d, Sense::Max))
                .unwrap()
                .objective;
            assert!(lo <= prev_min + 1e-9 && hi >= prev_max - 1e-9);
            assert!(lo <= hi + 1e-9);
            prev_min = lo;
            prev_max = hi;
        }
    }

    #[test]
    fn batch_preserves_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = random_data(&mut rng, 3, 0.3);
        let vs = [[0.0, 0.5, 1.0], [1.0, 0.5, 0.0], [0.2, 0.2, 0.9]];
        let probs: Vec<_> = vs
            .iter()
            .map(|v| QclpProblem::new(v, &d, Sense::Min))
            .collect();
        let out = solve_batch(&probs);
        for (p, r) in probs.iter().zip(out) {
            assert_eq!(r.unwrap(), solve(p).unwrap());
        }
    }
}
