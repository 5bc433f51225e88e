//! Bilinear EDMDc: assemble snapshot matrices from trajectories, solve the
//! Kronecker-product least squares, and predict with the learned model.
//!
//! Identification is one joint minimum-norm solve,
//! `[A, B, H] = Z⁺ · [Z; U; U⊗Z]⁺` with `C = X·Z⁺`, rather than an
//! alternating scheme; the Kronecker form turns the bilinear term into an
//! ordinary regressor block.

use std::path::Path;

use nalgebra::{SMatrix, Vector2};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Control, State, Trajectory};
use crate::error::Error;
use crate::lifting::{self, N_OBS};
use crate::linalg::{kron_vec, lstsq_min_norm, Matrix, Vector};
use crate::Result;

/// State dimension.
pub const N_STATE: usize = 3;
/// Input dimension.
pub const N_INPUT: usize = 2;
/// Version tag written to model files.
pub const MODEL_FORMAT: &str = "koopman-bilinear-v1";

/// Provenance of a fitted model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Number of training trajectories.
    pub trajectories: usize,
    /// Total snapshot pairs used by the fit.
    pub steps: usize,
    /// Perturbation rate of the training plant.
    pub lambda: f64,
    /// Seed of the training data stream.
    pub seed: u64,
    /// `‖Z' − AZ − BU − H(U⊗Z)‖_F / √T` at the fitted coefficients.
    pub residual: f64,
}

/// The learned bilinear realization `z⁺ = Az + Bu + H(u ⊗ z)`, `x = Cz`.
#[derive(Clone, Debug, PartialEq)]
pub struct KoopmanModel {
    /// `n_obs × n_obs` drift block.
    pub a: Matrix,
    /// `n_obs × m` input block.
    pub b: Matrix,
    /// `n_obs × (m·n_obs)` bilinear block.
    pub h: Matrix,
    /// `n × n_obs` projection back to the state space.
    pub c: Matrix,
    pub dictionary_id: String,
    /// Sampling period the model was identified at.
    pub ts: f64,
    pub training_meta: TrainingMeta,
}

impl KoopmanModel {
    /// Build a model from explicit matrices, checking dimensions.
    pub fn new(a: Matrix, b: Matrix, h: Matrix, c: Matrix, ts: f64) -> Result<Self> {
        let model = KoopmanModel {
            a,
            b,
            h,
            c,
            dictionary_id: lifting::DICTIONARY_ID.to_string(),
            ts,
            training_meta: TrainingMeta {
                trajectories: 0,
                steps: 0,
                lambda: 0.0,
                seed: 0,
                residual: 0.0,
            },
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("A", self.a.shape(), (N_OBS, N_OBS)),
            ("B", self.b.shape(), (N_OBS, N_INPUT)),
            ("H", self.h.shape(), (N_OBS, N_INPUT * N_OBS)),
            ("C", self.c.shape(), (N_STATE, N_OBS)),
        ];
        for (name, got, want) in dims {
            if got != want {
                return Err(Error::dim(format!(
                    "model matrix {name}: expected {}x{}, got {}x{}",
                    want.0, want.1, got.0, got.1
                )));
            }
        }
        if !(self.ts.is_finite() && self.ts > 0.0) {
            return Err(Error::invalid("model", format!("ts must be > 0, got {}", self.ts)));
        }
        for (name, m) in [("A", &self.a), ("B", &self.b), ("H", &self.h), ("C", &self.c)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("model", format!("matrix {name} has non-finite entries")));
            }
        }
        if self.dictionary_id != lifting::DICTIONARY_ID {
            return Err(Error::invalid(
                "model",
                format!(
                    "unknown dictionary `{}` (this build lifts with `{}`)",
                    self.dictionary_id,
                    lifting::DICTIONARY_ID
                ),
            ));
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            dictionary_id: self.dictionary_id.clone(),
            ts: self.ts,
            n: N_STATE,
            m: N_INPUT,
            n_obs: N_OBS,
            a: rows_of(&self.a),
            b: rows_of(&self.b),
            h: rows_of(&self.h),
            c: rows_of(&self.c),
            training_meta: self.training_meta.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::invalid(
                "model file",
                format!("format `{}`, expected `{MODEL_FORMAT}`", file.format),
            ));
        }
        if (file.n, file.m, file.n_obs) != (N_STATE, N_INPUT, N_OBS) {
            return Err(Error::invalid(
                "model file",
                format!(
                    "dimensions (n={}, m={}, n_obs={}) do not match ({N_STATE}, {N_INPUT}, {N_OBS})",
                    file.n, file.m, file.n_obs
                ),
            ));
        }
        let model = KoopmanModel {
            a: matrix_of("A", &file.a, N_OBS, N_OBS)?,
            b: matrix_of("B", &file.b, N_OBS, N_INPUT)?,
            h: matrix_of("H", &file.h, N_OBS, N_INPUT * N_OBS)?,
            c: matrix_of("C", &file.c, N_STATE, N_OBS)?,
            dictionary_id: file.dictionary_id,
            ts: file.ts,
            training_meta: file.training_meta,
        };
        model.validate()?;
        Ok(model)
    }
}

/// On-disk model schema (row-major nested arrays).
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    dictionary_id: String,
    ts: f64,
    n: usize,
    m: usize,
    n_obs: usize,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "H")]
    h: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    training_meta: TrainingMeta,
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().cloned().collect())
        .collect()
}

fn matrix_of(name: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<Matrix> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::dim(format!("model file matrix {name}: expected {nrows}x{ncols}")));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Snapshot matrices assembled from one or more trajectories. All blocks
/// share the column count `T`; column `t` of `z` is the lift of column `t`
/// of `x`, and `u_kron_z` holds the per-column Kronecker products.
#[derive(Clone, Debug)]
pub struct SnapshotData {
    /// States, `n × T`.
    pub x: Matrix,
    /// Lifted states, `n_obs × T`.
    pub z: Matrix,
    /// Lifted successors, `n_obs × T`.
    pub zp: Matrix,
    /// Inputs, `m × T`.
    pub u: Matrix,
    /// `u ⊗ z` per column, `(m·n_obs) × T`.
    pub u_kron_z: Matrix,
    /// Sampling period shared by every source trajectory.
    pub ts: f64,
    /// Number of source trajectories.
    pub trajectories: usize,
}

impl SnapshotData {
    pub fn transitions(&self) -> usize {
        self.z.ncols()
    }
}

/// Concatenate per-trajectory snapshot pairs. The last state of one
/// trajectory is never paired with the first of the next.
pub fn assemble(trajs: &[Trajectory]) -> Result<SnapshotData> {
    if trajs.is_empty() {
        return Err(Error::invalid("assemble", "no trajectories"));
    }
    let ts = trajs[0].ts;
    let mut total = 0usize;
    for (i, traj) in trajs.iter().enumerate() {
        if traj.states.len() < 2 || traj.states.len() != traj.controls.len() + 1 {
            return Err(Error::invalid(
                "assemble",
                format!("trajectory {i} needs >= 2 states and controls = states - 1"),
            ));
        }
        if traj.ts != ts {
            return Err(Error::dim(format!(
                "assemble: trajectory {i} has ts {} but trajectory 0 has ts {ts}",
                traj.ts
            )));
        }
        total += traj.transitions();
    }

    let mut x = Matrix::zeros(N_STATE, total);
    let mut z = Matrix::zeros(N_OBS, total);
    let mut zp = Matrix::zeros(N_OBS, total);
    let mut u = Matrix::zeros(N_INPUT, total);
    let mut u_kron_z = Matrix::zeros(N_INPUT * N_OBS, total);

    let mut col = 0;
    for traj in trajs {
        for k in 0..traj.transitions() {
            let s = &traj.states[k];
            let lifted = lifting::lift(s);
            let lifted_next = lifting::lift(&traj.states[k + 1]);
            let uk = &traj.controls[k];
            x.set_column(col, &s.as_vector());
            z.column_mut(col).copy_from_slice(lifted.as_slice());
            zp.column_mut(col).copy_from_slice(lifted_next.as_slice());
            u[(0, col)] = uk.v;
            u[(1, col)] = uk.omega;
            let kron = kron_vec(
                &Vector::from_column_slice(&[uk.v, uk.omega]),
                &Vector::from_column_slice(lifted.as_slice()),
            );
            u_kron_z.column_mut(col).copy_from(&kron);
            col += 1;
        }
    }

    Ok(SnapshotData {
        x,
        z,
        zp,
        u,
        u_kron_z,
        ts,
        trajectories: trajs.len(),
    })
}

/// Solve the two least-squares problems and package the model.
///
/// The regressor stacks as `[Z; U; U⊗Z]` with the coefficient blocks named
/// by the regressor they multiply (`A`↔`Z`, `B`↔`U`, `H`↔`U⊗Z`).
pub fn fit(data: &SnapshotData, tol: f64) -> Result<KoopmanModel> {
    let t = data.transitions();
    if t == 0 {
        return Err(Error::invalid("fit", "no snapshot pairs"));
    }
    let n_reg = N_OBS + N_INPUT + N_INPUT * N_OBS;
    let mut stacked = Matrix::zeros(n_reg, t);
    stacked.rows_mut(0, N_OBS).copy_from(&data.z);
    stacked.rows_mut(N_OBS, N_INPUT).copy_from(&data.u);
    stacked
        .rows_mut(N_OBS + N_INPUT, N_INPUT * N_OBS)
        .copy_from(&data.u_kron_z);

    let w = lstsq_min_norm(&stacked, &data.zp, tol)?;
    let a = w.columns(0, N_OBS).into_owned();
    let b = w.columns(N_OBS, N_INPUT).into_owned();
    let h = w.columns(N_OBS + N_INPUT, N_INPUT * N_OBS).into_owned();
    let c = lstsq_min_norm(&data.z, &data.x, tol)?;

    let residual = (&data.zp - &w * &stacked).norm() / (t as f64).sqrt();

    Ok(KoopmanModel {
        a,
        b,
        h,
        c,
        dictionary_id: lifting::DICTIONARY_ID.to_string(),
        ts: data.ts,
        training_meta: TrainingMeta {
            trajectories: data.trajectories,
            steps: t,
            lambda: 0.0,
            seed: 0,
            residual,
        },
    })
}

/// The model compiled into fixed-size matrices for the solver hot path.
///
/// `h0`/`h1` are the `H` blocks multiplying `u_0·z` and `u_1·z`, so
/// `H(u ⊗ z) = u_0·h0·z + u_1·h1·z`.
#[derive(Clone, Debug)]
pub struct BilinearPredictor {
    a: SMatrix<f64, N_OBS, N_OBS>,
    b: SMatrix<f64, N_OBS, N_INPUT>,
    h0: SMatrix<f64, N_OBS, N_OBS>,
    h1: SMatrix<f64, N_OBS, N_OBS>,
    c: SMatrix<f64, N_STATE, N_OBS>,
}

impl BilinearPredictor {
    pub fn from_model(model: &KoopmanModel) -> Self {
        let a = SMatrix::from_fn(|i, j| model.a[(i, j)]);
        let b = SMatrix::from_fn(|i, j| model.b[(i, j)]);
        let h0 = SMatrix::from_fn(|i, j| model.h[(i, j)]);
        let h1 = SMatrix::from_fn(|i, j| model.h[(i, N_OBS + j)]);
        let c = SMatrix::from_fn(|i, j| model.c[(i, j)]);
        BilinearPredictor { a, b, h0, h1, c }
    }

    /// Lift, evolve one step, project: `C(Az + Bu + H(u ⊗ z))`.
    pub fn step(&self, s: &State, u: &Control) -> State {
        let z = lifting::lift(s);
        let z_next =
            self.a * z + self.b * Vector2::new(u.v, u.omega) + self.h0 * z * u.v + self.h1 * z * u.omega;
        let x = self.c * z_next;
        State::new(x[0], x[1], x[2])
    }

    /// Closed-form Jacobians `(∂f/∂x, ∂f/∂u)` of [`Self::step`].
    pub fn jacobians(&self, s: &State, u: &Control) -> (SMatrix<f64, 3, 3>, SMatrix<f64, 3, 2>) {
        let z = lifting::lift(s);
        let lift_jac = lifting::lift_jacobian(s);
        let dz_dx = (self.a + self.h0 * u.v + self.h1 * u.omega) * lift_jac;
        let jx = self.c * dz_dx;
        let du0 = self.b.column(0) + self.h0 * z;
        let du1 = self.b.column(1) + self.h1 * z;
        let ju = self.c * SMatrix::<f64, N_OBS, 2>::from_columns(&[du0, du1]);
        (jx, ju)
    }
}

/// One-step prediction with the learned model: lift, evolve, project.
pub fn predict_step(model: &KoopmanModel, s: &State, u: &Control) -> State {
    BilinearPredictor::from_model(model).step(s, u)
}

/// Open-loop rollout of the learned model, re-lifting at every step (the
/// recursion runs in the state space, not the lifted space).
pub fn predict_trajectory(
    model: &KoopmanModel,
    x0: &State,
    controls: &[Control],
) -> Result<Trajectory> {
    if controls.is_empty() {
        return Err(Error::invalid("predict_trajectory", "control sequence is empty"));
    }
    let predictor = BilinearPredictor::from_model(model);
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*x0);
    let mut s = *x0;
    for (k, u) in controls.iter().enumerate() {
        s = predictor.step(&s, u);
        if !s.is_finite() {
            return Err(Error::NonFiniteState { step: k });
        }
        states.push(s);
    }
    Ok(Trajectory {
        ts: model.ts,
        states,
        controls: controls.to_vec(),
    })
}

/// Trajectory-prediction error in percent:
/// `100·sqrt(Σ_k ‖x_k − x̂_k‖² / N)` summed over all state components and
/// samples `k = 1..N` (the shared initial state is excluded).
pub fn rmse_percent(truth: &Trajectory, pred: &Trajectory) -> Result<f64> {
    if truth.states.len() != pred.states.len() {
        return Err(Error::dim(format!(
            "rmse_percent: {} states vs {}",
            truth.states.len(),
            pred.states.len()
        )));
    }
    let n = truth.states.len() - 1;
    if n == 0 {
        return Err(Error::invalid("rmse_percent", "trajectories have no transitions"));
    }
    let sum: f64 = truth.states[1..]
        .iter()
        .zip(&pred.states[1..])
        .map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.psi - b.psi).powi(2))
        .sum();
    Ok(100.0 * (sum / n as f64).sqrt())
}
