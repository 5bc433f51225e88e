//! Projected L-BFGS for box-constrained smooth minimization.
//!
//! The inner solver of the augmented-Lagrangian loop. Free variables (the
//! shooting states) carry infinite bounds; the control block carries the
//! actuation box. Steps follow the projected-gradient arc with Armijo
//! backtracking, falling back to steepest descent whenever the quasi-Newton
//! direction loses descent.

use std::collections::VecDeque;

use nalgebra::DVector;

const MEMORY: usize = 10;
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

pub struct MinimizeResult {
    pub value: f64,
    pub pg_inf_norm: f64,
    pub iterations: usize,
}

pub fn project(theta: &mut DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) {
    for i in 0..theta.len() {
        theta[i] = theta[i].clamp(lower[i], upper[i]);
    }
}

/// `‖θ − P(θ − g)‖∞`, the first-order stationarity measure on the box.
pub fn projected_gradient_norm(
    theta: &DVector<f64>,
    grad: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> f64 {
    let mut norm: f64 = 0.0;
    for i in 0..theta.len() {
        let stepped = (theta[i] - grad[i]).clamp(lower[i], upper[i]);
        norm = norm.max((theta[i] - stepped).abs());
    }
    norm
}

fn two_loop(grad: &DVector<f64>, history: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = grad.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let alpha = rho * s.dot(&q);
        q.axpy(-alpha, y, 1.0);
        alphas.push(alpha);
    }
    if let Some((s, y, _)) = history.back() {
        let yy = y.dot(y);
        if yy > 0.0 {
            q *= s.dot(y) / yy;
        }
    }
    for ((s, y, rho), alpha) in history.iter().zip(alphas.into_iter().rev()) {
        let beta = rho * y.dot(&q);
        q.axpy(alpha - beta, s, 1.0);
    }
    q
}

/// Minimize `eval` over the box, starting from (and overwriting) `theta`.
/// `eval` must write the gradient into its second argument.
pub fn minimize<F>(
    mut eval: F,
    theta: &mut DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    tol_pg: f64,
    max_iterations: usize,
) -> MinimizeResult
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    project(theta, lower, upper);
    let n = theta.len();
    let mut grad = DVector::zeros(n);
    let mut grad_new = DVector::zeros(n);
    let mut value = eval(theta, &mut grad);
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(MEMORY);

    let mut iterations = 0;
    loop {
        let pg = projected_gradient_norm(theta, &grad, lower, upper);
        if pg <= tol_pg || iterations >= max_iterations {
            return MinimizeResult {
                value,
                pg_inf_norm: pg,
                iterations,
            };
        }
        iterations += 1;

        let mut direction = two_loop(&grad, &history);
        direction.neg_mut();
        let descent = direction.dot(&grad);
        if !descent.is_finite() || descent >= -1e-14 * direction.norm() * grad.norm() {
            direction.copy_from(&grad);
            direction.neg_mut();
        }

        let mut alpha = if history.is_empty() {
            (1.0 / grad.norm().max(1e-12)).min(1.0)
        } else {
            1.0
        };
        let theta_old = theta.clone();
        let value_old = value;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            let mut candidate = &theta_old + &direction * alpha;
            project(&mut candidate, lower, upper);
            let step = &candidate - &theta_old;
            if step.amax() == 0.0 {
                alpha *= 0.5;
                continue;
            }
            let dir_deriv = grad.dot(&step);
            let candidate_value = eval(&candidate, &mut grad_new);
            if candidate_value.is_finite()
                && candidate_value <= value_old + ARMIJO_C1 * dir_deriv.min(0.0)
            {
                theta.copy_from(&candidate);
                value = candidate_value;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // Line search stalled; report the current stationarity honestly.
            let pg = projected_gradient_norm(theta, &grad, lower, upper);
            return MinimizeResult {
                value,
                pg_inf_norm: pg,
                iterations,
            };
        }

        let s = &*theta - &theta_old;
        let y = &grad_new - &grad;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if history.len() == MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        grad.copy_from(&grad_new);
    }
}
