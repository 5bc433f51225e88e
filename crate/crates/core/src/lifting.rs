//! The observable dictionary mapping robot states into the lifted space, and
//! the linear projection back.
//!
//! The dictionary is fixed: `[1, x, y, ψ, cos ψ, sin ψ]`, constant first.
//! Its identifier doubles as the serialized ordering, so model files are
//! self-describing.

use nalgebra::{SMatrix, SVector};

use crate::dynamics::State;
use crate::error::Error;
use crate::linalg::Matrix;
use crate::Result;

/// Number of observables produced by [`lift`].
pub const N_OBS: usize = 6;

/// Identifier of the fixed dictionary; spells out the observable ordering.
pub const DICTIONARY_ID: &str = "1-x-y-psi-cospsi-sinpsi";

/// A lifted state.
pub type Observable = SVector<f64, N_OBS>;

/// Lift a state into the observable space: `[1, x, y, ψ, cos ψ, sin ψ]`.
pub fn lift(s: &State) -> Observable {
    Observable::from_column_slice(&[1.0, s.x, s.y, s.psi, s.psi.cos(), s.psi.sin()])
}

/// Jacobian `∂lift/∂(x, y, ψ)`, a 6×3 matrix.
pub fn lift_jacobian(s: &State) -> SMatrix<f64, N_OBS, 3> {
    let (sin_psi, cos_psi) = s.psi.sin_cos();
    SMatrix::<f64, N_OBS, 3>::from_row_slice(&[
        0.0, 0.0, 0.0, //
        1.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, //
        0.0, 0.0, 1.0, //
        0.0, 0.0, -sin_psi, //
        0.0, 0.0, cos_psi,
    ])
}

/// Project an observable back to the state space through `C` (3×6).
pub fn project(c: &Matrix, z: &Observable) -> Result<State> {
    if c.nrows() != 3 || c.ncols() != N_OBS {
        return Err(Error::dim(format!(
            "project: C must be 3x{N_OBS}, got {}x{}",
            c.nrows(),
            c.ncols()
        )));
    }
    let mut out = [0.0f64; 3];
    for (i, item) in out.iter_mut().enumerate() {
        *item = (0..N_OBS).map(|j| c[(i, j)] * z[j]).sum();
    }
    Ok(State {
        x: out[0],
        y: out[1],
        psi: out[2],
    })
}

/// The exact selector matrix reading `x, y, ψ` back out of a lifted state.
pub fn selector() -> Matrix {
    let mut c = Matrix::zeros(3, N_OBS);
    c[(0, 1)] = 1.0;
    c[(1, 2)] = 1.0;
    c[(2, 3)] = 1.0;
    c
}
