//! Multinomial logistic regression with an L2 penalty, fitted by L-BFGS.

use std::collections::VecDeque;

use crate::scalar::dot;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub classes: usize,
    pub dim: usize,
    /// `[class][feature]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LogisticModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| self.bias[c] + dot(&self.weights[c * self.dim..(c + 1) * self.dim], x))
            .collect()
    }

    /// Highest-scoring class; the lowest index wins ties.
    pub fn predict(&self, x: &[f64]) -> usize {
        let s = self.scores(x);
        let mut best = 0;
        for c in 1..s.len() {
            if s[c] > s[best] {
                best = c;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitInfo {
    pub iterations: usize,
    pub grad_norm: f64,
    pub loss: f64,
}

/// Mean cross-entropy plus `λ/2 ‖W‖²` (bias unpenalized) and its gradient.
/// Parameters are packed as `[W (classes × dim), b (classes)]`.
pub(crate) fn loss_grad(params: &[f64], x: &[Vec<f64>], y: &[usize], classes: usize, lambda: f64, grad: &mut [f64]) -> f64 {
    let dim = x.first().map_or(0, |r| r.len());
    let n = x.len() as f64;
    let (w, b) = params.split_at(classes * dim);
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    let mut z = vec![0.0; classes];
    for (xi, &yi) in x.iter().zip(y) {
        for c in 0..classes {
            z[c] = b[c] + dot(&w[c * dim..(c + 1) * dim], xi);
        }
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - z[yi];
        for c in 0..classes {
            let p = (z[c] - lse).exp() - if c == yi { 1.0 } else { 0.0 };
            let r = p / n;
            for (g, &v) in grad[c * dim..(c + 1) * dim].iter_mut().zip(xi) {
                *g += r * v;
            }
            grad[classes * dim + c] += r;
        }
    }
    loss /= n;
    for (g, &v) in grad[..classes * dim].iter_mut().zip(w) {
        *g += lambda * v;
    }
    loss + 0.5 * lambda * dot(w, w)
}

/// Fits from zero weights. Stops once the gradient 2-norm is at most `tol`
/// or after `max_iter` iterations.
pub fn fit_logistic(
    x: &[Vec<f64>],
    y: &[usize],
    classes: usize,
    lambda: f64,
    max_iter: usize,
    tol: f64,
) -> (LogisticModel, FitInfo) {
    const HISTORY: usize = 10;
    let dim = x.first().map_or(0, |r| r.len());
    let np = classes * (dim + 1);
    let mut p = vec![0.0; np];
    let mut g = vec![0.0; np];
    let mut f = loss_grad(&p, x, y, classes, lambda, &mut g);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut trial = vec![0.0; np];
    let mut g_trial = vec![0.0; np];
    while iterations < max_iter && dot(&g, &g).sqrt() > tol {
        // two-loop recursion for the search direction
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, yv, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(yv).for_each(|(qi, &yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = hist.back().map_or(1.0, |(s, yv, _)| dot(s, yv) / dot(yv, yv));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, yv, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
            let bcoef = rho * dot(yv, &q);
            q.iter_mut().zip(s).for_each(|(qi, &si)| *qi += (a - bcoef) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            // not a descent direction: restart from steepest descent
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = if hist.is_empty() { 1.0 / dot(&g, &g).sqrt().max(1.0) } else { 1.0 };
        // backtracking Armijo search
        let mut accepted = false;
        for _ in 0..60 {
            trial.iter_mut().zip(&p).zip(&dir).for_each(|((t, &pi), &di)| *t = pi + step * di);
            let ft = loss_grad(&trial, x, y, classes, lambda, &mut g_trial);
            if ft <= f + 1e-4 * step * slope {
                let s: Vec<f64> = trial.iter().zip(&p).map(|(a, b)| a - b).collect();
                let yv: Vec<f64> = g_trial.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &yv);
                if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() {
                    if hist.len() == HISTORY {
                        hist.pop_front();
                    }
                    hist.push_back((s, yv, 1.0 / sy));
                }
                p.copy_from_slice(&trial);
                g.copy_from_slice(&g_trial);
                f = ft;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    let grad_norm = dot(&g, &g).sqrt();
    let (w, b) = p.split_at(classes * dim);
    (
        LogisticModel {
            classes,
            dim,
            weights: w.to_vec(),
            bias: b.to_vec(),
        },
        FitInfo {
            iterations,
            grad_norm,
            loss: f,
        },
    )
}
