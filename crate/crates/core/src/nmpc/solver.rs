//! Augmented-Lagrangian transcription of the shooting problem.
//!
//! The decision vector stacks the `K+1` shooting states first and the `K`
//! controls after them. Shooting residuals enter as equality terms
//! `λᵀr + (μ/2)‖r‖²`; obstacle margins and the position box enter through
//! the one-sided form `(max(0, λ + μg)² − λ²)/(2μ)`; the actuation box is
//! left to the projection of the inner solver.

use nalgebra::{DVector, Vector2, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::lbfgs;
use super::{obstacle_margin, stage_cost, OcpSolution, OcpSpec, SolverConfig};
use crate::dynamics::{Control, State};

const PENALTY_CAP: f64 = 1e12;

/// One finite face of the position box, as the inequality `g ≤ 0`.
struct BoxFace {
    /// 0 for x, 1 for y.
    dim: usize,
    /// `g = coord − bound` when true, `g = bound − coord` otherwise.
    upper: bool,
    bound: f64,
}

struct AlProblem<'a> {
    spec: &'a OcpSpec,
    x_current: State,
    horizon: usize,
    n_theta: usize,
    n_eq: usize,
    faces: Vec<BoxFace>,
    ineq_per_node: usize,
    n_ineq: usize,
}

impl<'a> AlProblem<'a> {
    fn new(spec: &'a OcpSpec, x_current: &State) -> Self {
        let k = spec.horizon;
        let mut faces = Vec::new();
        for (dim, (lo, hi)) in [
            (spec.state_box.x_min, spec.state_box.x_max),
            (spec.state_box.y_min, spec.state_box.y_max),
        ]
        .into_iter()
        .enumerate()
        {
            if hi.is_finite() {
                faces.push(BoxFace { dim, upper: true, bound: hi });
            }
            if lo.is_finite() {
                faces.push(BoxFace { dim, upper: false, bound: lo });
            }
        }
        let ineq_per_node = spec.obstacles.len() + faces.len();
        AlProblem {
            spec,
            x_current: *x_current,
            horizon: k,
            n_theta: 3 * (k + 1) + 2 * k,
            n_eq: 3 * (k + 1),
            faces,
            ineq_per_node,
            n_ineq: (k + 1) * ineq_per_node,
        }
    }

    fn x_off(&self, k: usize) -> usize {
        3 * k
    }

    fn u_off(&self, k: usize) -> usize {
        3 * (self.horizon + 1) + 2 * k
    }

    fn state_at(&self, theta: &DVector<f64>, k: usize) -> State {
        let o = self.x_off(k);
        State::new(theta[o], theta[o + 1], theta[o + 2])
    }

    fn control_at(&self, theta: &DVector<f64>, k: usize) -> Control {
        let o = self.u_off(k);
        Control::new(theta[o], theta[o + 1])
    }

    fn pack(&self, init: Option<&OcpSolution>) -> DVector<f64> {
        let mut theta = DVector::zeros(self.n_theta);
        match init {
            Some(guess)
                if guess.states.len() == self.horizon + 1
                    && guess.controls.len() == self.horizon =>
            {
                for (k, s) in guess.states.iter().enumerate() {
                    let o = self.x_off(k);
                    theta[o] = s.x;
                    theta[o + 1] = s.y;
                    theta[o + 2] = s.psi;
                }
                for (k, u) in guess.controls.iter().enumerate() {
                    let o = self.u_off(k);
                    theta[o] = u.v;
                    theta[o + 1] = u.omega;
                }
            }
            _ => {
                // Cold start: hold the current pose, zero controls.
                for k in 0..=self.horizon {
                    let o = self.x_off(k);
                    theta[o] = self.x_current.x;
                    theta[o + 1] = self.x_current.y;
                    theta[o + 2] = self.x_current.psi;
                }
            }
        }
        theta
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let mut lower = DVector::from_element(self.n_theta, f64::NEG_INFINITY);
        let mut upper = DVector::from_element(self.n_theta, f64::INFINITY);
        let cb = &self.spec.control_box;
        for k in 0..self.horizon {
            let o = self.u_off(k);
            lower[o] = cb.v_min;
            upper[o] = cb.v_max;
            lower[o + 1] = cb.omega_min;
            upper[o + 1] = cb.omega_max;
        }
        (lower, upper)
    }

    fn objective(&self, theta: &DVector<f64>) -> f64 {
        (0..self.horizon)
            .map(|k| stage_cost(&self.state_at(theta, k), &self.control_at(theta, k), self.spec))
            .sum()
    }

    /// Equality residuals (3 per node) and inequality values, in the layout
    /// the multiplier vectors use.
    fn constraints(&self, theta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let mut eq = DVector::zeros(self.n_eq);
        let mut ineq = DVector::zeros(self.n_ineq);

        let r0 = self.state_at(theta, 0).as_vector() - self.x_current.as_vector();
        eq.fixed_rows_mut::<3>(0).copy_from(&r0);
        for k in 0..self.horizon {
            let predicted = self.spec.predictor.step(&self.state_at(theta, k), &self.control_at(theta, k));
            let r = self.state_at(theta, k + 1).as_vector() - predicted.as_vector();
            eq.fixed_rows_mut::<3>(3 * (k + 1)).copy_from(&r);
        }

        for k in 0..=self.horizon {
            let s = self.state_at(theta, k);
            let base = k * self.ineq_per_node;
            for (i, o) in self.spec.obstacles.iter().enumerate() {
                ineq[base + i] = obstacle_margin(&s, o, self.spec.robot_radius);
            }
            for (i, face) in self.faces.iter().enumerate() {
                let coord = if face.dim == 0 { s.x } else { s.y };
                ineq[base + self.spec.obstacles.len() + i] = if face.upper {
                    coord - face.bound
                } else {
                    face.bound - coord
                };
            }
        }
        (eq, ineq)
    }

    fn max_violation(&self, eq: &DVector<f64>, ineq: &DVector<f64>) -> f64 {
        let eq_max = eq.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let in_max = ineq.iter().fold(0.0f64, |m, v| m.max(*v));
        eq_max.max(in_max)
    }

    /// Augmented-Lagrangian value and gradient in one pass.
    fn eval(
        &self,
        theta: &DVector<f64>,
        lam_eq: &DVector<f64>,
        lam_in: &DVector<f64>,
        mu: f64,
        grad: &mut DVector<f64>,
    ) -> f64 {
        grad.fill(0.0);
        let mut value = 0.0;
        let q = &self.spec.state_weights;
        let r_w = &self.spec.control_weights;
        let x_ref = &self.spec.x_ref;

        // Stage costs, k = 0..K-1.
        for k in 0..self.horizon {
            let s = self.state_at(theta, k);
            let u = self.control_at(theta, k);
            let d = [s.x - x_ref.x, s.y - x_ref.y, s.psi - x_ref.psi];
            value += q[0] * d[0] * d[0] + q[1] * d[1] * d[1] + q[2] * d[2] * d[2];
            value += r_w[0] * u.v * u.v + r_w[1] * u.omega * u.omega;
            let xo = self.x_off(k);
            for i in 0..3 {
                grad[xo + i] += 2.0 * q[i] * d[i];
            }
            let uo = self.u_off(k);
            grad[uo] += 2.0 * r_w[0] * u.v;
            grad[uo + 1] += 2.0 * r_w[1] * u.omega;
        }

        // Initial-state pin.
        let r0 = self.state_at(theta, 0).as_vector() - self.x_current.as_vector();
        let lam0 = Vector3::new(lam_eq[0], lam_eq[1], lam_eq[2]);
        value += lam0.dot(&r0) + 0.5 * mu * r0.norm_squared();
        let s0 = lam0 + r0 * mu;
        for i in 0..3 {
            grad[i] += s0[i];
        }

        // Shooting residuals.
        for k in 0..self.horizon {
            let sk = self.state_at(theta, k);
            let uk = self.control_at(theta, k);
            let predicted = self.spec.predictor.step(&sk, &uk);
            let (jx, ju) = self.spec.predictor.jacobians(&sk, &uk);
            let r = self.state_at(theta, k + 1).as_vector() - predicted.as_vector();
            let lam = Vector3::new(lam_eq[3 * (k + 1)], lam_eq[3 * (k + 1) + 1], lam_eq[3 * (k + 1) + 2]);
            value += lam.dot(&r) + 0.5 * mu * r.norm_squared();
            let s_vec = lam + r * mu;
            let gx_next = self.x_off(k + 1);
            for i in 0..3 {
                grad[gx_next + i] += s_vec[i];
            }
            let back_x = jx.transpose() * s_vec;
            let xo = self.x_off(k);
            for i in 0..3 {
                grad[xo + i] -= back_x[i];
            }
            let back_u: Vector2<f64> = ju.transpose() * s_vec;
            let uo = self.u_off(k);
            grad[uo] -= back_u[0];
            grad[uo + 1] -= back_u[1];
        }

        // Obstacle margins and position box, every node.
        for k in 0..=self.horizon {
            let s = self.state_at(theta, k);
            let base = k * self.ineq_per_node;
            let xo = self.x_off(k);
            for (i, o) in self.spec.obstacles.iter().enumerate() {
                let dx = s.x - o.cx;
                let dy = s.y - o.cy;
                let dist = (dx * dx + dy * dy).sqrt();
                let g = -dist + self.spec.robot_radius + o.radius;
                let lam = lam_in[base + i];
                let t = (lam + mu * g).max(0.0);
                value += (t * t - lam * lam) / (2.0 * mu);
                if t > 0.0 {
                    let safe = dist.max(1e-12);
                    grad[xo] += t * (-dx / safe);
                    grad[xo + 1] += t * (-dy / safe);
                }
            }
            for (i, face) in self.faces.iter().enumerate() {
                let coord = if face.dim == 0 { s.x } else { s.y };
                let g = if face.upper { coord - face.bound } else { face.bound - coord };
                let lam = lam_in[base + self.spec.obstacles.len() + i];
                let t = (lam + mu * g).max(0.0);
                value += (t * t - lam * lam) / (2.0 * mu);
                if t > 0.0 {
                    let sign = if face.upper { 1.0 } else { -1.0 };
                    grad[xo + face.dim] += t * sign;
                }
            }
        }

        value
    }

    fn unpack(&self, theta: &DVector<f64>) -> (Vec<State>, Vec<Control>) {
        let states = (0..=self.horizon).map(|k| self.state_at(theta, k)).collect();
        let controls = (0..self.horizon)
            .map(|k| self.spec.control_box.clamp(&self.control_at(theta, k)))
            .collect();
        (states, controls)
    }
}

pub(crate) fn solve(
    x_current: &State,
    spec: &OcpSpec,
    init: Option<&OcpSolution>,
    cfg: &SolverConfig,
) -> OcpSolution {
    debug_assert!(spec.validate().is_ok());
    let problem = AlProblem::new(spec, x_current);
    let (lower, upper) = problem.bounds();
    let mut theta = problem.pack(init);
    lbfgs::project(&mut theta, &lower, &upper);

    let mut lam_eq = DVector::zeros(problem.n_eq);
    let mut lam_in = DVector::zeros(problem.n_ineq);
    let mut mu = cfg.penalty_init;

    let mut best_theta = theta.clone();
    let mut best_violation = f64::INFINITY;
    let mut best_cost = f64::INFINITY;
    let mut prev_violation = f64::INFINITY;
    let mut total_inner = 0;
    let mut outer_used = 0;
    let mut converged = false;

    for outer in 0..cfg.max_outer {
        outer_used = outer + 1;
        let inner_tol = (1e-3 * 0.1f64.powi(outer as i32)).max(cfg.tol_opt);
        let result = lbfgs::minimize(
            |t, g| problem.eval(t, &lam_eq, &lam_in, mu, g),
            &mut theta,
            &lower,
            &upper,
            inner_tol,
            cfg.max_inner,
        );
        total_inner += result.iterations;

        let (eq, ineq) = problem.constraints(&theta);
        let violation = problem.max_violation(&eq, &ineq);
        let cost = problem.objective(&theta);

        let feasible = violation <= cfg.tol_feas;
        let best_feasible = best_violation <= cfg.tol_feas;
        if (feasible && (!best_feasible || cost < best_cost))
            || (!best_feasible && violation < best_violation)
        {
            best_theta.copy_from(&theta);
            best_violation = violation;
            best_cost = cost;
        }

        if feasible && result.pg_inf_norm <= cfg.tol_opt {
            converged = true;
            break;
        }

        // First-order multiplier updates, then penalty growth when the
        // violation is not shrinking fast enough.
        lam_eq.axpy(mu, &eq, 1.0);
        for i in 0..lam_in.len() {
            lam_in[i] = (lam_in[i] + mu * ineq[i]).max(0.0);
        }
        if violation > 0.25 * prev_violation {
            mu = (mu * cfg.penalty_growth).min(PENALTY_CAP);
        }
        prev_violation = violation;
    }

    let (states, controls) = problem.unpack(&best_theta);
    OcpSolution {
        cost: best_cost,
        max_violation: best_violation,
        outer_iters: outer_used,
        inner_iters: total_inner,
        converged,
        states,
        controls,
    }
}

/// Diagnostic: largest relative error between the analytic gradient of the
/// augmented Lagrangian and a central finite difference, over `points`
/// random iterates, multipliers, and penalties. Points falling on a hinge
/// kink of the one-sided penalty are resampled.
pub fn check_al_gradients(spec: &OcpSpec, x_current: &State, points: usize, seed: u64) -> f64 {
    let problem = AlProblem::new(spec, x_current);
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut grad = DVector::zeros(problem.n_theta);
    let mut scratch = DVector::zeros(problem.n_theta);

    let mut checked = 0;
    let mut attempts = 0;
    while checked < points && attempts < points * 20 {
        attempts += 1;
        let mut theta = DVector::zeros(problem.n_theta);
        for k in 0..=problem.horizon {
            let o = problem.x_off(k);
            theta[o] = x_current.x + rng.gen_range(-0.5..0.5);
            theta[o + 1] = x_current.y + rng.gen_range(-0.5..0.5);
            theta[o + 2] = x_current.psi + rng.gen_range(-0.5..0.5);
        }
        for k in 0..problem.horizon {
            let o = problem.u_off(k);
            theta[o] = rng.gen_range(spec.control_box.v_min..spec.control_box.v_max);
            theta[o + 1] = rng.gen_range(spec.control_box.omega_min..spec.control_box.omega_max);
        }
        let lam_eq = DVector::from_fn(problem.n_eq, |_, _| rng.gen_range(-1.0..1.0));
        let lam_in = DVector::from_fn(problem.n_ineq, |_, _| rng.gen_range(0.0..1.0));
        let mu = 10.0f64;

        // The one-sided penalty is only C¹; stay away from its kinks.
        let (_, ineq) = problem.constraints(&theta);
        let near_kink = ineq
            .iter()
            .enumerate()
            .any(|(i, g)| (lam_in[i] + mu * g).abs() < 1e-4);
        if near_kink {
            continue;
        }
        checked += 1;

        problem.eval(&theta, &lam_eq, &lam_in, mu, &mut grad);
        for i in 0..problem.n_theta {
            let eps = 1e-6 * (1.0 + theta[i].abs());
            let saved = theta[i];
            theta[i] = saved + eps;
            let hi = problem.eval(&theta, &lam_eq, &lam_in, mu, &mut scratch);
            theta[i] = saved - eps;
            let lo = problem.eval(&theta, &lam_eq, &lam_in, mu, &mut scratch);
            theta[i] = saved;
            let fd = (hi - lo) / (2.0 * eps);
            let rel = (grad[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    assert!(checked == points, "gradient check could not find {points} kink-free samples");
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::koopman::KoopmanModel;
    use crate::lifting::{selector, N_OBS};
    use crate::linalg::Matrix;
    use crate::nmpc::{
        dynamics_residual, solve_ocp, ControlBox, Obstacle, Predictor, StateBox,
        DEFAULT_CONTROL_WEIGHTS, DEFAULT_STATE_WEIGHTS,
    };

    fn spec_with(predictor: Predictor, horizon: usize, obstacles: Vec<Obstacle>) -> OcpSpec {
        OcpSpec {
            horizon,
            state_weights: DEFAULT_STATE_WEIGHTS,
            control_weights: DEFAULT_CONTROL_WEIGHTS,
            x_ref: State::new(0.0, 0.0, 0.0),
            control_box: ControlBox {
                v_min: -0.6,
                v_max: 0.6,
                omega_min: -std::f64::consts::FRAC_PI_4,
                omega_max: std::f64::consts::FRAC_PI_4,
            },
            state_box: StateBox {
                x_min: -2.0,
                x_max: 2.0,
                y_min: -2.0,
                y_max: 2.0,
            },
            obstacles,
            robot_radius: 0.15,
            predictor,
        }
    }

    fn identity_model() -> KoopmanModel {
        KoopmanModel::new(
            Matrix::identity(N_OBS, N_OBS),
            Matrix::zeros(N_OBS, 2),
            Matrix::zeros(N_OBS, 2 * N_OBS),
            selector(),
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn gradients_match_finite_differences_nominal() {
        let spec = spec_with(
            Predictor::nominal(0.1),
            8,
            vec![Obstacle::new(0.45, 0.8, 0.25), Obstacle::new(1.0, 0.45, 0.25)],
        );
        let err = check_al_gradients(&spec, &State::new(0.2, 0.3, 0.1), 30, 7);
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn gradients_match_finite_differences_koopman() {
        let model = identity_model();
        let spec = spec_with(
            Predictor::koopman(&model),
            8,
            vec![Obstacle::new(0.5, 0.5, 0.3)],
        );
        let err = check_al_gradients(&spec, &State::new(0.0, 0.0, 0.0), 30, 11);
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn at_goal_solution_is_rest() {
        let spec = spec_with(Predictor::nominal(0.1), 10, Vec::new());
        let sol = solve_ocp(&State::new(0.0, 0.0, 0.0), &spec, None, &SolverConfig::default());
        assert!(sol.converged);
        assert!(sol.cost < 1e-8, "cost {}", sol.cost);
        for u in &sol.controls {
            assert!(u.v.abs() < 1e-4 && u.omega.abs() < 1e-4);
        }
    }

    #[test]
    fn converged_solutions_are_feasible() {
        let spec = {
            let mut s = spec_with(
                Predictor::nominal(0.1),
                12,
                vec![Obstacle::new(0.4, 0.25, 0.2)],
            );
            s.x_ref = State::new(0.8, 0.5, 0.0);
            s
        };
        let cfg = SolverConfig::default();
        let sol = solve_ocp(&State::new(0.0, 0.0, 0.0), &spec, None, &cfg);
        assert!(sol.converged, "violation {}", sol.max_violation);
        assert!(sol.max_violation <= cfg.tol_feas);

        let res = dynamics_residual(&State::new(0.0, 0.0, 0.0), &sol.states, &sol.controls, &spec);
        assert!(res.iter().all(|r| r.amax() <= cfg.tol_feas));
        for s in &sol.states {
            for o in &spec.obstacles {
                assert!(obstacle_margin(s, o, spec.robot_radius) <= cfg.tol_feas);
            }
            assert!(s.x <= spec.state_box.x_max + cfg.tol_feas);
            assert!(s.x >= spec.state_box.x_min - cfg.tol_feas);
            assert!(s.y <= spec.state_box.y_max + cfg.tol_feas);
            assert!(s.y >= spec.state_box.y_min - cfg.tol_feas);
        }
        for u in &sol.controls {
            assert!(u.v >= spec.control_box.v_min && u.v <= spec.control_box.v_max);
            assert!(u.omega >= spec.control_box.omega_min && u.omega <= spec.control_box.omega_max);
        }
    }

    #[test]
    fn single_shooting_rollout_reproduces_cost() {
        let mut spec = spec_with(Predictor::nominal(0.1), 10, Vec::new());
        spec.x_ref = State::new(0.5, 0.3, 0.0);
        // Tight tolerances so the shooting gaps cannot leak into the cost.
        let cfg = SolverConfig {
            tol_opt: 1e-9,
            tol_feas: 1e-9,
            max_outer: 40,
            ..SolverConfig::default()
        };
        let x0 = State::new(0.0, 0.0, 0.0);
        let sol = solve_ocp(&x0, &spec, None, &cfg);
        assert!(sol.converged);

        let mut s = x0;
        let mut rolled_cost = 0.0;
        for u in &sol.controls {
            rolled_cost += stage_cost(&s, u, &spec);
            s = spec.predictor.step(&s, u);
        }
        assert!(
            (rolled_cost - sol.cost).abs() < 1e-6,
            "multiple-shooting cost {} vs rolled {}",
            sol.cost,
            rolled_cost
        );
    }

    #[test]
    fn predictor_swap_agrees_on_trivial_goal() {
        let x0 = State::new(0.3, -0.2, 0.4);
        let cfg = SolverConfig::default();
        let mut nominal = spec_with(Predictor::nominal(0.1), 8, Vec::new());
        nominal.x_ref = x0;
        let sol_nominal = solve_ocp(&x0, &nominal, None, &cfg);

        let model = identity_model();
        let mut koopman = spec_with(Predictor::koopman(&model), 8, Vec::new());
        koopman.x_ref = x0;
        let sol_koopman = solve_ocp(&x0, &koopman, None, &cfg);

        assert!(sol_nominal.converged && sol_koopman.converged);
        assert!((sol_nominal.cost - sol_koopman.cost).abs() <= 1e-6);
    }

    #[test]
    fn infeasible_problem_reports_nonconvergence_without_panicking() {
        // Start pinned inside an obstacle: the initial-state equality and the
        // obstacle inequality cannot both hold.
        let mut spec = spec_with(
            Predictor::nominal(0.1),
            4,
            vec![Obstacle::new(0.0, 0.0, 0.5)],
        );
        spec.x_ref = State::new(1.5, 0.0, 0.0);
        let cfg = SolverConfig {
            max_outer: 6,
            ..SolverConfig::default()
        };
        let sol = solve_ocp(&State::new(0.0, 0.0, 0.0), &spec, None, &cfg);
        assert!(!sol.converged);
        assert!(sol.max_violation > cfg.tol_feas);
        assert_eq!(sol.controls.len(), 4);
    }
}
