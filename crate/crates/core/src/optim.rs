//! Deterministic full-batch L-BFGS for the smooth convex fits (seen expert,
//! zero-shot expert, gate).

use std::collections::VecDeque;

/// A differentiable objective. `evaluate` writes the gradient into `grad` and returns the value.
pub trait Objective {
    fn dim(&self) -> usize;
    fn evaluate(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Clone, Copy, Debug)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop once the infinity norm of the gradient falls below this.
    pub gradient_tolerance: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            max_iterations: 1000,
            gradient_tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Two-loop recursion: returns `-H g` for the current inverse-Hessian estimate.
fn search_direction(grad: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

pub fn minimize<O: Objective>(objective: &O, x0: Vec<f64>, options: LbfgsOptions) -> Minimum {
    let n = objective.dim();
    assert_eq!(x0.len(), n, "initial point has wrong dimension");
    let mut x = x0;
    let mut grad = vec![0.0; n];
    let mut value = objective.evaluate(&x, &mut grad);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(options.memory);
    let mut iterations = 0;

    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];

    while iterations < options.max_iterations {
        let gnorm = inf_norm(&grad);
        if gnorm <= options.gradient_tolerance {
            return Minimum { x, value, gradient_norm: gnorm, iterations, converged: true };
        }
        let mut direction = search_direction(&grad, &history);
        let mut slope = dot(&direction, &grad);
        if !(slope < 0.0) {
            // Not a descent direction: restart from steepest descent.
            history.clear();
            direction = grad.iter().map(|g| -g).collect();
            slope = dot(&direction, &grad);
        }
        let mut step = if history.is_empty() {
            (1.0 / inf_norm(&direction)).min(1.0)
        } else {
            1.0
        };

        let mut accepted = false;
        let mut trial_value = value;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                trial[i] = x[i] + step * direction[i];
            }
            trial_value = objective.evaluate(&trial, &mut trial_grad);
            if trial_value.is_finite() && trial_value <= value + ARMIJO_C1 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted || trial_value >= value {
            // No further decrease is representable; we are at the optimum to machine precision.
            let gnorm = inf_norm(&grad);
            return Minimum { x, value, gradient_norm: gnorm, iterations, converged: false };
        }

        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if history.len() == options.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x.copy_from_slice(&trial);
        grad.copy_from_slice(&trial_grad);
        value = trial_value;
    }
    let gnorm = inf_norm(&grad);
    Minimum {
        x,
        value,
        gradient_norm: gnorm,
        iterations,
        converged: gnorm <= options.gradient_tolerance,
    }
}
