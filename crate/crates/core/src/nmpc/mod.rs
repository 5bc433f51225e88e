//! Receding-horizon optimal control: multiple-shooting transcription with
//! state-space decision variables, the learned bilinear predictor (or the
//! nominal RK4 model) as equality constraints, obstacle and box inequality
//! constraints, and an augmented-Lagrangian solver.
//!
//! The decision vector keeps states and controls in the state space,
//! `3(K+1) + 2K` variables for horizon `K`; lifting only happens inside the
//! predictor, which is what keeps the problem small.

mod lbfgs;
mod solver;

pub use solver::check_al_gradients;

use nalgebra::{Matrix3, Matrix3x2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, Control, PerturbationSample, State};
use crate::error::Error;
use crate::koopman::{BilinearPredictor, KoopmanModel};
use crate::Result;

/// Horizon used by the closed-loop navigation defaults.
pub const DEFAULT_HORIZON: usize = 20;
/// Diagonal state weights `Q` used by the closed-loop navigation defaults.
pub const DEFAULT_STATE_WEIGHTS: [f64; 3] = [1.0, 5.0, 0.1];
/// Diagonal input weights `R` used by the closed-loop navigation defaults.
pub const DEFAULT_CONTROL_WEIGHTS: [f64; 2] = [0.5, 0.05];

/// A circular obstacle in the plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Obstacle {
    pub fn new(cx: f64, cy: f64, radius: f64) -> Self {
        Obstacle { cx, cy, radius }
    }
}

/// Actuation limits applied by projection in the inner solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub v_min: f64,
    pub v_max: f64,
    pub omega_min: f64,
    pub omega_max: f64,
}

impl ControlBox {
    pub fn clamp(&self, u: &Control) -> Control {
        Control::new(
            u.v.clamp(self.v_min, self.v_max),
            u.omega.clamp(self.omega_min, self.omega_max),
        )
    }
}

/// Planar position bounds, enforced as inequality constraints at every node.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

/// The dynamics model the controller predicts with.
#[derive(Clone, Debug)]
pub enum Predictor {
    /// Learned bilinear model.
    Koopman { predictor: BilinearPredictor, ts: f64 },
    /// Nominal differential-drive kinematics discretized by RK4.
    Nominal { ts: f64 },
}

impl Predictor {
    pub fn koopman(model: &KoopmanModel) -> Self {
        Predictor::Koopman {
            predictor: BilinearPredictor::from_model(model),
            ts: model.ts,
        }
    }

    pub fn nominal(ts: f64) -> Self {
        Predictor::Nominal { ts }
    }

    pub fn ts(&self) -> f64 {
        match self {
            Predictor::Koopman { ts, .. } | Predictor::Nominal { ts } => *ts,
        }
    }

    /// One-step prediction `f(x, u)`.
    pub fn step(&self, s: &State, u: &Control) -> State {
        match self {
            Predictor::Koopman { predictor, .. } => predictor.step(s, u),
            Predictor::Nominal { ts } => {
                dynamics::rk4_step(s, u, &PerturbationSample::NONE, *ts)
            }
        }
    }

    /// Closed-form Jacobians `(∂f/∂x, ∂f/∂u)`.
    pub fn jacobians(&self, s: &State, u: &Control) -> (Matrix3<f64>, Matrix3x2<f64>) {
        match self {
            Predictor::Koopman { predictor, .. } => predictor.jacobians(s, u),
            Predictor::Nominal { ts } => nominal_rk4_jacobians(s, u, *ts),
        }
    }
}

/// Jacobians of the nominal RK4 step, by tangent propagation through the
/// four stages.
fn nominal_rk4_jacobians(s: &State, u: &Control, ts: f64) -> (Matrix3<f64>, Matrix3x2<f64>) {
    let fx = |state: &Vector3<f64>| -> Matrix3<f64> {
        let (sin_psi, cos_psi) = state[2].sin_cos();
        Matrix3::new(
            0.0, 0.0, -u.v * sin_psi, //
            0.0, 0.0, u.v * cos_psi, //
            0.0, 0.0, 0.0,
        )
    };
    let fu = |state: &Vector3<f64>| -> Matrix3x2<f64> {
        let (sin_psi, cos_psi) = state[2].sin_cos();
        Matrix3x2::new(
            cos_psi, 0.0, //
            sin_psi, 0.0, //
            0.0, 1.0,
        )
    };
    let deriv = |state: &Vector3<f64>| -> Vector3<f64> {
        dynamics::perturbed_derivative(
            &State::from_vector(state),
            u,
            &PerturbationSample::NONE,
        )
    };

    let eye = Matrix3::identity();
    let x0 = s.as_vector();

    let k1 = deriv(&x0);
    let k1x = fx(&x0);
    let k1u = fu(&x0);

    let x2 = x0 + k1 * (ts / 2.0);
    let k2x = fx(&x2) * (eye + k1x * (ts / 2.0));
    let k2u = fu(&x2) + fx(&x2) * k1u * (ts / 2.0);
    let k2 = deriv(&x2);

    let x3 = x0 + k2 * (ts / 2.0);
    let k3x = fx(&x3) * (eye + k2x * (ts / 2.0));
    let k3u = fu(&x3) + fx(&x3) * k2u * (ts / 2.0);
    let k3 = deriv(&x3);

    let x4 = x0 + k3 * ts;
    let k4x = fx(&x4) * (eye + k3x * ts);
    let k4u = fu(&x4) + fx(&x4) * k3u * ts;

    let jx = eye + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (ts / 6.0);
    let ju = (k1u + k2u * 2.0 + k3u * 2.0 + k4u) * (ts / 6.0);
    (jx, ju)
}

/// The finite-horizon optimal control problem data.
#[derive(Clone, Debug)]
pub struct OcpSpec {
    /// Prediction horizon `K`.
    pub horizon: usize,
    /// Diagonal of `Q`.
    pub state_weights: [f64; 3],
    /// Diagonal of `R`.
    pub control_weights: [f64; 2],
    /// Constant reference pose.
    pub x_ref: State,
    pub control_box: ControlBox,
    pub state_box: StateBox,
    pub obstacles: Vec<Obstacle>,
    pub robot_radius: f64,
    pub predictor: Predictor,
}

impl OcpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("ocp spec", "horizon must be >= 1"));
        }
        if self.control_box.v_min >= self.control_box.v_max
            || self.control_box.omega_min >= self.control_box.omega_max
        {
            return Err(Error::invalid("ocp spec", "control box is empty"));
        }
        if self.robot_radius <= 0.0 {
            return Err(Error::invalid("ocp spec", "robot radius must be > 0"));
        }
        if self.state_weights.iter().any(|w| *w < 0.0)
            || self.control_weights.iter().any(|w| *w < 0.0)
        {
            return Err(Error::invalid("ocp spec", "weights must be nonnegative"));
        }
        if self.obstacles.iter().any(|o| o.radius <= 0.0) {
            return Err(Error::invalid("ocp spec", "obstacle radius must be > 0"));
        }
        Ok(())
    }
}

/// Solver tolerances and augmented-Lagrangian schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Projected-gradient norm target for the inner solver.
    pub tol_opt: f64,
    /// Maximum constraint violation accepted as converged.
    pub tol_feas: f64,
    /// Outer (multiplier update) iteration cap.
    pub max_outer: usize,
    /// Inner iteration cap per outer iteration.
    pub max_inner: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol_opt: 1e-6,
            tol_feas: 1e-6,
            max_outer: 30,
            max_inner: 200,
            penalty_init: 10.0,
            penalty_growth: 10.0,
        }
    }
}

/// Result of one OCP solve.
#[derive(Clone, Debug)]
pub struct OcpSolution {
    /// `K` planned controls.
    pub controls: Vec<Control>,
    /// `K + 1` planned states.
    pub states: Vec<State>,
    /// Objective value at the returned iterate.
    pub cost: f64,
    /// Largest equality residual or positive inequality value.
    pub max_violation: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub converged: bool,
}

/// Stage cost `‖s − x_ref‖²_Q + ‖u‖²_R` with diagonal `Q`, `R`.
pub fn stage_cost(s: &State, u: &Control, spec: &OcpSpec) -> f64 {
    let q = &spec.state_weights;
    let r = &spec.control_weights;
    let dx = s.x - spec.x_ref.x;
    let dy = s.y - spec.x_ref.y;
    let dpsi = s.psi - spec.x_ref.psi;
    q[0] * dx * dx + q[1] * dy * dy + q[2] * dpsi * dpsi + r[0] * u.v * u.v + r[1] * u.omega * u.omega
}

/// Signed obstacle clearance `−‖pos − center‖ + r + r_o`; feasible iff ≤ 0.
pub fn obstacle_margin(s: &State, o: &Obstacle, robot_radius: f64) -> f64 {
    let d = ((s.x - o.cx).powi(2) + (s.y - o.cy).powi(2)).sqrt();
    -d + robot_radius + o.radius
}

/// Shooting-constraint residuals. Slot 0 holds `X[0] − x_current`; slot
/// `k + 1` holds `X[k+1] − f(X[k], U[k])`.
pub fn dynamics_residual(
    x_current: &State,
    states: &[State],
    controls: &[Control],
    spec: &OcpSpec,
) -> Vec<Vector3<f64>> {
    assert_eq!(states.len(), controls.len() + 1, "states must outnumber controls by one");
    let mut out = Vec::with_capacity(states.len());
    out.push(states[0].as_vector() - x_current.as_vector());
    for (k, u) in controls.iter().enumerate() {
        let predicted = spec.predictor.step(&states[k], u);
        out.push(states[k + 1].as_vector() - predicted.as_vector());
    }
    out
}

/// Receding-horizon warm start: controls shifted left by one with the last
/// entry duplicated, states re-rolled from the new current state so the
/// dynamics residual of the guess is zero by construction.
pub fn warm_start_shift(prev: &OcpSolution, x_current: &State, spec: &OcpSpec) -> OcpSolution {
    let k = prev.controls.len();
    let mut controls = Vec::with_capacity(k);
    controls.extend_from_slice(&prev.controls[1..]);
    if let Some(last) = prev.controls.last() {
        controls.push(*last);
    }
    let mut states = Vec::with_capacity(k + 1);
    states.push(*x_current);
    let mut s = *x_current;
    for u in &controls {
        s = spec.predictor.step(&s, u);
        states.push(s);
    }
    let cost = states[..k]
        .iter()
        .zip(&controls)
        .map(|(s, u)| stage_cost(s, u, spec))
        .sum();
    OcpSolution {
        controls,
        states,
        cost,
        max_violation: 0.0,
        outer_iters: 0,
        inner_iters: 0,
        converged: false,
    }
}

/// Solve the OCP from `x_current` by the augmented-Lagrangian method.
///
/// Equality (shooting) and inequality (obstacle, state-box) constraints are
/// handled with multiplier estimates and quadratic penalties; the control box
/// is handled by projection in the inner solver. Returns the best iterate
/// found; non-convergence is reported through the flag, never as an error.
pub fn solve_ocp(
    x_current: &State,
    spec: &OcpSpec,
    init: Option<&OcpSolution>,
    cfg: &SolverConfig,
) -> OcpSolution {
    solver::solve(x_current, spec, init, cfg)
}
