//! Ground-truth plant: the differential-drive model with stochastic velocity
//! perturbations, RK4 integration, and trajectory rollout.
//!
//! The perturbed kinematics are
//!
//! ```text
//! ẋ = (v + βv)·cos ψ + αv·sin ψ
//! ẏ = (v + βv)·sin ψ − αv·cos ψ
//! ψ̇ = ω + γω
//! ```
//!
//! with `α, β, γ` drawn independently from an exponential distribution of
//! mean `λ`. The forward perturbation `βv` and the lateral slip `αv` scale
//! with the commanded speed, so the unforced robot never drifts.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Planar robot pose. The heading is unwrapped; the observable dictionary
/// consumes `cos ψ` and `sin ψ`, so unbounded angles are harmless and
/// wrapping would break RK4 continuity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

impl State {
    pub fn new(x: f64, y: f64, psi: f64) -> Self {
        State { x, y, psi }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.psi.is_finite()
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.psi)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        State::new(v[0], v[1], v[2])
    }
}

/// Commanded forward and angular velocity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub v: f64,
    pub omega: f64,
}

impl Control {
    pub fn new(v: f64, omega: f64) -> Self {
        Control { v, omega }
    }

    pub fn zero() -> Self {
        Control::new(0.0, 0.0)
    }
}

/// One realization of the multiplicative perturbation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationSample {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl PerturbationSample {
    pub const NONE: PerturbationSample = PerturbationSample {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };
}

/// When the perturbation parameters are redrawn during a rollout.
///
/// Per-step redrawing models slip-like disturbances and is the harsher test;
/// per-trajectory keeps one draw for the whole rollout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    #[default]
    PerStep,
    PerTrajectory,
}

/// Perturbation intensity. `lambda` is the mean of each of `α, β, γ`;
/// `lambda = 0` denotes the nominal plant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub lambda: f64,
    #[serde(default)]
    pub resample_mode: ResampleMode,
}

impl PerturbationSpec {
    pub fn nominal() -> Self {
        PerturbationSpec {
            lambda: 0.0,
            resample_mode: ResampleMode::PerStep,
        }
    }

    pub fn new(lambda: f64) -> Self {
        PerturbationSpec {
            lambda,
            resample_mode: ResampleMode::PerStep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid(
                "perturbation spec",
                format!("lambda must be finite and >= 0, got {}", self.lambda),
            ));
        }
        Ok(())
    }
}

/// A sampled rollout: `states` has exactly one more entry than `controls`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub ts: f64,
    pub states: Vec<State>,
    pub controls: Vec<Control>,
}

impl Trajectory {
    /// Number of transitions (snapshot pairs) in the trajectory.
    pub fn transitions(&self) -> usize {
        self.controls.len()
    }

    /// CSV export with header `t,x,y,psi,v,omega`; the control columns are
    /// empty on the final row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,y,psi,v,omega\n");
        for (k, s) in self.states.iter().enumerate() {
            let t = k as f64 * self.ts;
            if let Some(u) = self.controls.get(k) {
                let _ = writeln!(out, "{t},{},{},{},{},{}", s.x, s.y, s.psi, u.v, u.omega);
            } else {
                let _ = writeln!(out, "{t},{},{},{},,", s.x, s.y, s.psi);
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Draw `(α, β, γ)` independently, each exponential with mean `spec.lambda`.
/// A zero rate yields the nominal plant and consumes no randomness.
pub fn sample_perturbation<R: Rng>(spec: &PerturbationSpec, rng: &mut R) -> PerturbationSample {
    if spec.lambda == 0.0 {
        return PerturbationSample::NONE;
    }
    let exp = Exp::new(1.0 / spec.lambda).expect("validated positive rate");
    PerturbationSample {
        alpha: exp.sample(rng),
        beta: exp.sample(rng),
        gamma: exp.sample(rng),
    }
}

/// Perturbed state derivative `(ẋ, ẏ, ψ̇)`.
pub fn perturbed_derivative(s: &State, u: &Control, p: &PerturbationSample) -> Vector3<f64> {
    let (sin_psi, cos_psi) = s.psi.sin_cos();
    let v_forward = u.v + p.beta * u.v;
    let v_side = p.alpha * u.v;
    Vector3::new(
        v_forward * cos_psi + v_side * sin_psi,
        v_forward * sin_psi - v_side * cos_psi,
        u.omega + p.gamma * u.omega,
    )
}

/// Classical fourth-order Runge–Kutta step with the control and perturbation
/// held constant over the interval.
pub fn rk4_step(s: &State, u: &Control, p: &PerturbationSample, ts: f64) -> State {
    let x0 = s.as_vector();
    let k1 = perturbed_derivative(s, u, p);
    let k2 = perturbed_derivative(&State::from_vector(&(x0 + k1 * (ts / 2.0))), u, p);
    let k3 = perturbed_derivative(&State::from_vector(&(x0 + k2 * (ts / 2.0))), u, p);
    let k4 = perturbed_derivative(&State::from_vector(&(x0 + k3 * ts)), u, p);
    State::from_vector(&(x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (ts / 6.0)))
}

/// Roll the plant forward under a control sequence.
///
/// Perturbations are redrawn according to `spec.resample_mode`. The result is
/// bitwise reproducible for a fixed seed stream.
pub fn simulate<R: Rng>(
    x0: &State,
    controls: &[Control],
    ts: f64,
    spec: &PerturbationSpec,
    rng: &mut R,
) -> Result<Trajectory> {
    if controls.is_empty() {
        return Err(Error::invalid("simulate", "control sequence is empty"));
    }
    spec.validate()?;
    let fixed = match spec.resample_mode {
        ResampleMode::PerTrajectory => Some(sample_perturbation(spec, rng)),
        ResampleMode::PerStep => None,
    };
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*x0);
    let mut s = *x0;
    for (k, u) in controls.iter().enumerate() {
        let p = fixed.unwrap_or_else(|| sample_perturbation(spec, rng));
        s = rk4_step(&s, u, &p, ts);
        if !s.is_finite() {
            return Err(Error::NonFiniteState { step: k });
        }
        states.push(s);
    }
    Ok(Trajectory {
        ts,
        states,
        controls: controls.to_vec(),
    })
}
