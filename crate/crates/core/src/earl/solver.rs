//! Solvers for the penalized surrogate objective.

use nalgebra::DMatrix;

use super::SolverDiagnostics;
use crate::data::Dataset;
use crate::error::{EarlError, Result};
use crate::features::FeatureMap;
use crate::linalg::{dot, norm, solve_spd, weighted_gram};
use crate::loss::SurrogateLoss;
use crate::weights::WeightPair;

/// The objective in the flat parametrization `[beta0, beta...]`, with the
/// weight pairs folded into the total weight on `phi(f)` and on `phi(-f)`.
pub(crate) struct Problem {
    z: Vec<f64>,
    d: usize,
    on_pos: Vec<f64>,
    on_neg: Vec<f64>,
    loss: SurrogateLoss,
    lambda: f64,
}

impl Problem {
    pub(crate) fn new(
        data: &Dataset,
        weights: &[WeightPair],
        map: &FeatureMap,
        loss: SurrogateLoss,
        lambda: f64,
    ) -> Result<Self> {
        if weights.len() != data.n() {
            return Err(EarlError::shape(format!(
                "{} weight pairs for {} subjects",
                weights.len(),
                data.n()
            )));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(EarlError::config(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        if let Some(i) = weights.iter().position(|w| !(w.pos.is_finite() && w.neg.is_finite())) {
            return Err(EarlError::Domain(format!("weight pair of subject {i} is not finite")));
        }
        let h = map.design(data, None)?;
        let q = map.len();
        let d = q + 1;
        let mut z = Vec::with_capacity(data.n() * d);
        for i in 0..data.n() {
            z.push(1.0);
            z.extend_from_slice(&h[i * q..(i + 1) * q]);
        }
        let (on_pos, on_neg) = weights.iter().map(|w| w.loss_split()).unzip();
        Ok(Problem { z, d, on_pos, on_neg, loss, lambda })
    }

    pub(crate) fn dim(&self) -> usize {
        self.d
    }

    fn n(&self) -> usize {
        self.on_pos.len()
    }

    fn margins(&self, beta: &[f64], f: &mut [f64]) {
        for (fi, row) in f.iter_mut().zip(self.z.chunks_exact(self.d)) {
            *fi = dot(row, beta);
        }
    }

    fn penalty(&self, beta: &[f64]) -> f64 {
        self.lambda * beta[1..].iter().map(|b| b * b).sum::<f64>()
    }

    fn value_at(&self, f: &[f64], beta: &[f64]) -> f64 {
        let l = self.loss;
        let risk: f64 = f
            .iter()
            .zip(self.on_pos.iter().zip(&self.on_neg))
            .map(|(&fi, (&wp, &wn))| {
                let mut s = 0.0;
                if wp != 0.0 {
                    s += wp * l.value(fi);
                }
                if wn != 0.0 {
                    s += wn * l.value(-fi);
                }
                s
            })
            .sum();
        risk / self.n() as f64 + self.penalty(beta)
    }

    pub(crate) fn value(&self, beta: &[f64]) -> f64 {
        let mut f = vec![0.0; self.n()];
        self.margins(beta, &mut f);
        self.value_at(&f, beta)
    }

    /// Derivative of the per-subject loss with respect to `f`.
    #[inline]
    fn dloss(&self, i: usize, fi: f64) -> f64 {
        let l = self.loss;
        let (wp, wn) = (self.on_pos[i], self.on_neg[i]);
        let mut g = 0.0;
        if wp != 0.0 {
            g += wp * l.derivative(fi);
        }
        if wn != 0.0 {
            g -= wn * l.derivative(-fi);
        }
        g
    }

    /// Gradient (a subgradient for the hinge) at `beta` given its margins.
    fn gradient_at(&self, f: &[f64], beta: &[f64], g: &mut [f64]) {
        g.iter_mut().for_each(|v| *v = 0.0);
        for (i, (&fi, row)) in f.iter().zip(self.z.chunks_exact(self.d)).enumerate() {
            let s = self.dloss(i, fi);
            if s != 0.0 {
                for (gk, zk) in g.iter_mut().zip(row) {
                    *gk += s * zk;
                }
            }
        }
        let inv_n = 1.0 / self.n() as f64;
        g[0] *= inv_n;
        for k in 1..self.d {
            g[k] = g[k] * inv_n + 2.0 * self.lambda * beta[k];
        }
    }

    pub(crate) fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.n()];
        self.margins(beta, &mut f);
        let mut g = vec![0.0; self.d];
        self.gradient_at(&f, beta, &mut g);
        g
    }

    fn hessian_at(&self, f: &[f64]) -> DMatrix<f64> {
        let l = self.loss;
        let inv_n = 1.0 / self.n() as f64;
        let mut h = weighted_gram(
            &self.z,
            |i| {
                let (wp, wn) = (self.on_pos[i], self.on_neg[i]);
                let mut c = 0.0;
                if wp != 0.0 {
                    c += wp * l.second_derivative(f[i]);
                }
                if wn != 0.0 {
                    c += wn * l.second_derivative(-f[i]);
                }
                c * inv_n
            },
            self.d,
        );
        for k in 1..self.d {
            h[(k, k)] += 2.0 * self.lambda;
        }
        h
    }
}

fn non_finite(iter: usize, beta: &[f64]) -> EarlError {
    EarlError::numerical(format!(
        "objective became non-finite at iteration {iter} (|beta| = {:.3e})",
        norm(beta)
    ))
}

/// Damped Newton with Armijo backtracking. Stops when the gradient norm
/// drops below `tol`; otherwise returns the best iterate after `max_iter`.
pub(crate) fn newton(
    problem: &Problem,
    start: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolverDiagnostics)> {
    let n = problem.n();
    let d = problem.dim();
    let zero = vec![0.0; d];
    let mut beta = start;
    let mut f = vec![0.0; n];
    problem.margins(&beta, &mut f);
    let mut obj = problem.value_at(&f, &beta);
    // A warm start that is worse than the origin is discarded.
    let obj0 = problem.value(&zero);
    if !obj.is_finite() || obj > obj0 {
        beta = zero;
        problem.margins(&beta, &mut f);
        obj = obj0;
    }
    if !obj.is_finite() {
        return Err(non_finite(0, &beta));
    }
    let mut g = vec![0.0; d];
    problem.gradient_at(&f, &beta, &mut g);
    let mut gnorm = norm(&g);
    let mut cand = vec![0.0; d];
    let mut fc = vec![0.0; n];
    let mut gc = vec![0.0; d];
    let mut iterations = 0;

    while gnorm >= tol && iterations < max_iter {
        iterations += 1;
        let mut dir = newton_direction(&problem.hessian_at(&f), &g);
        let mut slope = dot(&g, &dir);
        if slope.is_nan() || slope >= 0.0 {
            dir = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for k in 0..d {
                cand[k] = beta[k] + step * dir[k];
            }
            problem.margins(&cand, &mut fc);
            let c_obj = problem.value_at(&fc, &cand);
            if c_obj.is_finite() && c_obj <= obj + 1e-4 * step * slope {
                accepted = true;
            } else if step == 1.0 && c_obj.is_finite() && c_obj - obj <= 1e-13 * (1.0 + obj.abs()) {
                // Near the optimum the decrease is below rounding; accept a
                // full step that still shrinks the gradient.
                problem.gradient_at(&fc, &cand, &mut gc);
                accepted = norm(&gc) < gnorm;
            }
            if accepted {
                std::mem::swap(&mut beta, &mut cand);
                std::mem::swap(&mut f, &mut fc);
                obj = c_obj.min(obj);
                break;
            }
            step *= 0.5;
        }
        if !obj.is_finite() {
            return Err(non_finite(iterations, &beta));
        }
        if !accepted {
            break;
        }
        problem.gradient_at(&f, &beta, &mut g);
        gnorm = norm(&g);
    }
    let converged = gnorm < tol;
    if !converged {
        log::debug!("newton stopped after {iterations} iterations with gradient norm {gnorm:.3e}");
    }
    Ok((
        beta,
        SolverDiagnostics {
            iterations,
            gradient_norm: gnorm,
            converged,
        },
    ))
}

fn newton_direction(h: &DMatrix<f64>, g: &[f64]) -> Vec<f64> {
    let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
    if let Some(x) = solve_spd(h, &rhs, 1e-14) {
        return x;
    }
    let d = h.nrows();
    let scale = (0..d).map(|k| h[(k, k)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut mu = 1e-10 * scale;
    for _ in 0..20 {
        let mut damped = h.clone();
        for k in 0..d {
            damped[(k, k)] += mu;
        }
        if let Some(x) = solve_spd(&damped, &rhs, 1e-14) {
            return x;
        }
        mu *= 100.0;
    }
    rhs
}

/// Normalized subgradient steps of length `1/sqrt(t)` with iterate
/// averaging, projected onto the ball that must contain the minimizer when
/// `lambda > 0`. The best of the iterates and the running average is then
/// polished by exact line minimization along the intercept and the scale of
/// `beta`.
pub(crate) fn subgradient(
    problem: &Problem,
    start: Vec<f64>,
    iterations: usize,
) -> Result<(Vec<f64>, SolverDiagnostics)> {
    let n = problem.n();
    let d = problem.dim();
    let zero = vec![0.0; d];
    let obj0 = problem.value(&zero);
    if !obj0.is_finite() {
        return Err(non_finite(0, &zero));
    }
    // lambda |beta|^2 <= objective at the minimizer <= objective at zero.
    let radius = if problem.lambda > 0.0 {
        (obj0 / problem.lambda).sqrt()
    } else {
        f64::INFINITY
    };

    let mut beta = start;
    project(&mut beta, radius);
    let mut avg = beta.clone();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; d];
    let (mut best, mut best_obj) = (zero.clone(), obj0);

    for t in 1..=iterations {
        problem.margins(&beta, &mut f);
        let obj = problem.value_at(&f, &beta);
        if !obj.is_finite() {
            return Err(non_finite(t, &beta));
        }
        if obj < best_obj {
            best_obj = obj;
            best.copy_from_slice(&beta);
        }
        problem.gradient_at(&f, &beta, &mut g);
        let gn = norm(&g);
        if gn == 0.0 {
            break;
        }
        let step = 1.0 / (t as f64).sqrt() / gn;
        for k in 0..d {
            beta[k] -= step * g[k];
        }
        project(&mut beta, radius);
        let w = 1.0 / (t as f64 + 1.0);
        for k in 0..d {
            avg[k] += w * (beta[k] - avg[k]);
        }
        if t % 100 == 0 || t == iterations {
            let a_obj = problem.value(&avg);
            if a_obj < best_obj {
                best_obj = a_obj;
                best.copy_from_slice(&avg);
            }
        }
    }

    let mut params = polish(problem, best);
    if problem.value(&params) > obj0 {
        params = polish(problem, zero);
    }
    problem.margins(&params, &mut f);
    problem.gradient_at(&f, &params, &mut g);
    Ok((
        params,
        SolverDiagnostics {
            iterations,
            gradient_norm: norm(&g),
            converged: true,
        },
    ))
}

fn project(beta: &mut [f64], radius: f64) {
    if radius.is_finite() {
        let r = norm(&beta[1..]);
        if r > radius {
            let s = radius / r;
            beta[1..].iter_mut().for_each(|b| *b *= s);
        }
    }
}

/// Alternates the exact intercept minimizer with a golden-section search on
/// the scale of the slope coefficients until neither moves the objective.
fn polish(problem: &Problem, mut beta: Vec<f64>) -> Vec<f64> {
    let mut obj = problem.value(&beta);
    for _ in 0..25 {
        let before = obj;
        beta[0] = best_intercept(problem, &beta);
        obj = problem.value(&beta).min(obj);
        if norm(&beta[1..]) > 0.0 {
            let s = best_scale(problem, &beta);
            let mut scaled = beta.clone();
            scaled[1..].iter_mut().for_each(|b| *b *= s);
            let o = problem.value(&scaled);
            if o < obj {
                beta = scaled;
                obj = o;
            }
        }
        if before - obj <= 1e-12 * (1.0 + obj.abs()) {
            break;
        }
    }
    beta
}

/// Exact minimizer of the hinge objective over the intercept alone: the
/// objective is piecewise linear in `b` with slope
/// `-sum_{u_i > b} P_i + sum_{v_i < b} N_i`, so the minimizer is a weighted
/// quantile of the breakpoints.
fn best_intercept(problem: &Problem, beta: &[f64]) -> f64 {
    let mut events: Vec<(f64, f64)> = Vec::with_capacity(2 * problem.n());
    let mut target = 0.0;
    for (i, row) in problem.z.chunks_exact(problem.d).enumerate() {
        let o = dot(&row[1..], &beta[1..]);
        let (wp, wn) = (problem.on_pos[i], problem.on_neg[i]);
        if wp > 0.0 {
            events.push((1.0 - o, wp));
            target += wp;
        }
        if wn > 0.0 {
            events.push((-1.0 - o, wn));
        }
    }
    if events.is_empty() {
        return beta[0];
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cum = 0.0;
    for &(loc, w) in &events {
        cum += w;
        if cum >= target {
            return loc;
        }
    }
    events[events.len() - 1].0
}

fn best_scale(problem: &Problem, beta: &[f64]) -> f64 {
    let at = |s: f64| {
        let mut b = beta.to_vec();
        b[1..].iter_mut().for_each(|v| *v *= s);
        problem.value(&b)
    };
    let mut hi = 2.0;
    while hi < 1e6 && at(hi) < at(hi / 2.0) {
        hi *= 2.0;
    }
    let (mut a, mut b) = (0.0, hi);
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut e = a + r * (b - a);
    let (mut fc, mut fe) = (at(c), at(e));
    for _ in 0..80 {
        if fc <= fe {
            b = e;
            e = c;
            fe = fc;
            c = b - r * (b - a);
            fc = at(c);
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + r * (b - a);
            fe = at(e);
        }
        if b - a < 1e-10 * (1.0 + b) {
            break;
        }
    }
    let mid = 0.5 * (a + b);
    [mid, 1.0, 0.0]
        .into_iter()
        .min_by(|x, y| at(*x).total_cmp(&at(*y)))
        .unwrap_or(1.0)
}
