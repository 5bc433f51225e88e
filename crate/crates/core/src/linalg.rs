//! Dense linear-algebra primitives for the identification and control layers:
//! Kronecker products of vectors, the SVD-based Moore–Penrose pseudoinverse,
//! and minimum-norm least squares.
//!
//! Everything here is dense `f64`; the lifted dimension is six, so the only
//! large matrices are the snapshot blocks, which are short and very wide.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::Result;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative singular-value cutoff for pseudoinverse truncation.
pub const DEFAULT_PINV_TOL: f64 = 1e-12;

/// Maximum SVD sweeps before reporting non-convergence.
const SVD_MAX_ITERS: usize = 1000;

/// Kronecker product `u ⊗ z` of two vectors.
///
/// Output index `i*N + j` holds `u[i] * z[j]`: the block `u[0]*z` comes
/// first, then `u[1]*z`, and so on.
pub fn kron_vec(u: &Vector, z: &Vector) -> Vector {
    let n = z.len();
    let mut out = Vector::zeros(u.len() * n);
    for (i, &ui) in u.iter().enumerate() {
        for (j, &zj) in z.iter().enumerate() {
            out[i * n + j] = ui * zj;
        }
    }
    out
}

struct TruncatedSvd {
    /// Left singular vectors, `m × k`.
    u: Matrix,
    /// `V^T`, `k × n`.
    v_t: Matrix,
    /// Reciprocals of retained singular values, zero where truncated.
    inv_sigma: Vec<f64>,
}

/// Thin SVD with singular values `σ ≤ tol·σ_max` treated as zero.
fn truncated_svd(m: &Matrix, tol: f64) -> Result<TruncatedSvd> {
    let svd = m
        .clone()
        .try_svd(true, true, f64::EPSILON, SVD_MAX_ITERS)
        .ok_or(Error::SvdNonConvergence {
            iterations: SVD_MAX_ITERS,
        })?;
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = tol * sigma_max;
    let inv_sigma = svd
        .singular_values
        .iter()
        .map(|&s| if s > cutoff && s > 0.0 { 1.0 / s } else { 0.0 })
        .collect();
    Ok(TruncatedSvd {
        u: svd.u.expect("svd computed with u"),
        v_t: svd.v_t.expect("svd computed with v_t"),
        inv_sigma,
    })
}

/// Moore–Penrose pseudoinverse via full SVD with relative truncation.
///
/// Singular values `σ ≤ tol·σ_max` are zeroed, which makes the result the
/// unique pseudoinverse of the rank-truncated matrix.
pub fn pinv(m: &Matrix, tol: f64) -> Result<Matrix> {
    let svd = truncated_svd(m, tol)?;
    // M⁺ = V Σ⁺ Uᵀ
    let mut ut = svd.u.transpose();
    for (i, &inv_s) in svd.inv_sigma.iter().enumerate() {
        ut.row_mut(i).scale_mut(inv_s);
    }
    Ok(svd.v_t.transpose() * ut)
}

/// Minimum-Frobenius-norm solution `W` of `W·A ≈ Y`.
///
/// Equals `Y·A⁺` but never materializes `A⁺`: with `A = UΣVᵀ`,
/// `W = (Y V) Σ⁺ Uᵀ`, and `Y V` is formed one column at a time so a very
/// wide snapshot matrix never gets transposed wholesale.
pub fn lstsq_min_norm(a: &Matrix, y: &Matrix, tol: f64) -> Result<Matrix> {
    if a.ncols() != y.ncols() {
        return Err(Error::dim(format!(
            "lstsq_min_norm: A has {} columns but Y has {}",
            a.ncols(),
            y.ncols()
        )));
    }
    let svd = truncated_svd(a, tol)?;
    let k = svd.inv_sigma.len();
    let mut yv = Matrix::zeros(y.nrows(), k);
    for i in 0..k {
        let vi = svd.v_t.row(i).transpose();
        yv.column_mut(i).copy_from(&(y * vi));
        yv.column_mut(i).scale_mut(svd.inv_sigma[i]);
    }
    Ok(yv * svd.u.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_matrix(rng: &mut StdRng, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
    }

    fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
        (a - b).abs().max()
    }

    #[test]
    fn kron_vec_block_ordering() {
        let u = Vector::from_vec(vec![2.0, 3.0]);
        let z = Vector::from_vec(vec![1.0, 0.0, 4.0]);
        let k = kron_vec(&u, &z);
        assert_eq!(k.as_slice(), &[2.0, 0.0, 8.0, 3.0, 0.0, 12.0]);
    }

    #[test]
    fn kron_vec_identity_and_annihilation() {
        let z = Vector::from_vec(vec![1.5, -2.0, 0.25]);
        let k = kron_vec(&Vector::from_vec(vec![1.0, 0.0]), &z);
        assert_eq!(k.as_slice(), &[1.5, -2.0, 0.25, 0.0, 0.0, 0.0]);
        let k0 = kron_vec(&Vector::from_vec(vec![0.0, 0.0]), &z);
        assert!(k0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pinv_identity_is_identity() {
        let eye = Matrix::identity(3, 3);
        let p = pinv(&eye, DEFAULT_PINV_TOL).unwrap();
        assert_abs_diff_eq!(max_abs_diff(&p, &eye), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn pinv_reciprocates_nonzero_singular_values() {
        let m = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 0.0]));
        let p = pinv(&m, DEFAULT_PINV_TOL).unwrap();
        let expected = Matrix::from_diagonal(&Vector::from_vec(vec![0.5, 0.0]));
        assert_abs_diff_eq!(max_abs_diff(&p, &expected), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn pinv_left_inverse_of_full_column_rank() {
        let mut rng = StdRng::seed_from_u64(7);
        let m = random_matrix(&mut rng, 5, 3, 1.0);
        let p = pinv(&m, DEFAULT_PINV_TOL).unwrap();
        let prod = &p * &m;
        assert!(max_abs_diff(&prod, &Matrix::identity(3, 3)) < 1e-10);
    }

    #[test]
    fn penrose_identities_at_50x50() {
        let mut rng = StdRng::seed_from_u64(11);
        let m = random_matrix(&mut rng, 50, 50, 10.0);
        let p = pinv(&m, DEFAULT_PINV_TOL).unwrap();
        assert!(max_abs_diff(&(&m * &p * &m), &m) < 1e-9);
        assert!(max_abs_diff(&(&p * &m * &p), &p) < 1e-9);
    }

    #[test]
    fn lstsq_identity_system_returns_y() {
        let mut rng = StdRng::seed_from_u64(3);
        let y = random_matrix(&mut rng, 4, 6, 5.0);
        let w = lstsq_min_norm(&Matrix::identity(6, 6), &y, DEFAULT_PINV_TOL).unwrap();
        assert!(max_abs_diff(&w, &y) < 1e-12);
    }

    #[test]
    fn lstsq_recovers_generator_for_full_row_rank() {
        let mut rng = StdRng::seed_from_u64(19);
        let w0 = random_matrix(&mut rng, 4, 5, 2.0);
        let a = random_matrix(&mut rng, 5, 40, 1.0);
        let y = &w0 * &a;
        let w = lstsq_min_norm(&a, &y, DEFAULT_PINV_TOL).unwrap();
        assert!(max_abs_diff(&w, &w0) < 1e-9);
    }

    #[test]
    fn lstsq_zero_row_matches_reduced_normal_equations() {
        let mut rng = StdRng::seed_from_u64(23);
        let mut a = random_matrix(&mut rng, 4, 30, 1.0);
        a.row_mut(2).fill(0.0);
        let y = random_matrix(&mut rng, 3, 30, 1.0);
        let w = lstsq_min_norm(&a, &y, DEFAULT_PINV_TOL).unwrap();

        // Oracle: drop the zero row and solve the reduced system by normal
        // equations, W_red = Y Aᵀ (A Aᵀ)⁻¹.
        let a_red = a.clone().remove_row(2);
        let gram = &a_red * a_red.transpose();
        let w_red = &y * a_red.transpose() * gram.try_inverse().unwrap();

        for (ri, ri_red) in [0usize, 1, 3].into_iter().enumerate() {
            for c in 0..3 {
                assert_abs_diff_eq!(w[(c, ri_red)], w_red[(c, ri)], epsilon = 1e-9);
            }
        }
        for c in 0..3 {
            assert_abs_diff_eq!(w[(c, 2)], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn lstsq_residual_is_globally_minimal() {
        let mut rng = StdRng::seed_from_u64(31);
        let a = random_matrix(&mut rng, 6, 12, 1.0);
        let y = random_matrix(&mut rng, 3, 12, 1.0);
        let w = lstsq_min_norm(&a, &y, DEFAULT_PINV_TOL).unwrap();
        let base = (&y - &w * &a).norm();
        for _ in 0..1000 {
            let mut delta = random_matrix(&mut rng, 3, 6, 1.0);
            let norm = delta.norm();
            delta.scale_mut(1e-3 / norm);
            let perturbed = (&y - (&w + delta) * &a).norm();
            assert!(perturbed >= base - 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn penrose_identities_hold(rows in 1usize..8, cols in 1usize..8, seed in 0u64..1000) {
            let mut rng = StdRng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, rows, cols, 10.0);
            let p = pinv(&m, DEFAULT_PINV_TOL).unwrap();
            prop_assert!(max_abs_diff(&(&m * &p * &m), &m) < 1e-9);
            prop_assert!(max_abs_diff(&(&p * &m * &p), &p) < 1e-9);
        }

        #[test]
        fn kron_vec_is_bilinear_in_u(alpha in -10.0f64..10.0, seed in 0u64..1000) {
            let mut rng = StdRng::seed_from_u64(seed);
            let u = Vector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            let z = Vector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
            let scaled = kron_vec(&(&u * alpha), &z);
            let reference = kron_vec(&u, &z) * alpha;
            for (a, b) in scaled.iter().zip(reference.iter()) {
                // (α·u_i)·z_j and α·(u_i·z_j) differ by at most one rounding.
                prop_assert!((a - b).abs() <= f64::EPSILON * a.abs().max(b.abs()));
            }
        }
    }
}
