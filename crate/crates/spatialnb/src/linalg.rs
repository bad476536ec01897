//! Dense linear algebra helpers shared by the samplers.
//!
//! Large SPD factorisations go through LAPACK (via `ndarray-linalg`); the
//! per-unit K×K systems in the conditional updates are solved with small
//! pure-Rust Cholesky routines to avoid FFI call overhead in loops that run
//! millions of times per fit.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use ndarray_linalg::{Cholesky, UPLO};

/// Lower Cholesky factor of an SPD matrix, tagging failures with the
/// parameter block being factorised.
pub fn chol_lower(a: &Array2<f64>, block: &str) -> Result<Array2<f64>> {
    a.cholesky(UPLO::Lower).map_err(|_| Error::chol(block))
}

/// Solve L x = b by forward substitution (L lower triangular).
pub fn tri_solve_lower(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        let mut s = x[i];
        for j in 0..i {
            s -= l[[i, j]] * x[j];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve Lᵀ x = b by back substitution (L lower triangular).
pub fn tri_solve_lower_t(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in (i + 1)..n {
            s -= l[[j, i]] * x[j];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve (L Lᵀ) x = b given the lower factor L.
pub fn spd_solve(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let y = tri_solve_lower(l, b);
    tri_solve_lower_t(l, y.view())
}

/// log det(L Lᵀ) from the lower factor.
pub fn spd_logdet(l: &Array2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>()
}

/// xᵀ A x.
pub fn quad_form(x: ArrayView1<f64>, a: &Array2<f64>) -> f64 {
    let ax = a.dot(&x);
    x.dot(&ax)
}

/// AᵀA through BLAS dsyrk, returned with both triangles filled.
pub fn gram(a: &Array2<f64>) -> Array2<f64> {
    let (m, n) = a.dim();
    let mut c = Array2::<f64>::zeros((n, n));
    debug_assert!(a.is_standard_layout());
    unsafe {
        cblas_sys::cblas_dsyrk(
            cblas_sys::CBLAS_LAYOUT::CblasRowMajor,
            cblas_sys::CBLAS_UPLO::CblasLower,
            cblas_sys::CBLAS_TRANSPOSE::CblasTrans,
            n as i32,
            m as i32,
            1.0,
            a.as_ptr(),
            n as i32,
            0.0,
            c.as_mut_ptr(),
            n as i32,
        );
    }
    for i in 0..n {
        for j in (i + 1)..n {
            c[[i, j]] = c[[j, i]];
        }
    }
    c
}

/// In-place Cholesky of a small SPD matrix; the strict upper triangle is left
/// untouched. Returns an error naming `block` if a pivot is non-positive.
pub fn chol_small_in_place(a: &mut Array2<f64>, block: &str) -> Result<()> {
    let n = a.nrows();
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= a[[j, k]] * a[[j, k]];
        }
        if !(d > 0.0) {
            return Err(Error::chol(block));
        }
        let d = d.sqrt();
        a[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = s / d;
        }
    }
    Ok(())
}

/// Cholesky of a small SPD matrix, allocating the factor.
pub fn chol_small(a: &ArrayView2<f64>, block: &str) -> Result<Array2<f64>> {
    let mut l = a.to_owned();
    chol_small_in_place(&mut l, block)?;
    let n = l.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            l[[i, j]] = 0.0;
        }
    }
    Ok(l)
}

/// Inverse of a small SPD matrix via its Cholesky factor.
pub fn inv_small_spd(a: &ArrayView2<f64>, block: &str) -> Result<Array2<f64>> {
    let l = chol_small(a, block)?;
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    let mut e = Array1::<f64>::zeros(n);
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        let col = spd_solve(&l, e.view());
        inv.column_mut(j).assign(&col);
    }
    // clean up asymmetry from round-off
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = v;
            inv[[j, i]] = v;
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn spd3() -> Array2<f64> {
        array![[4.0, 1.0, 0.2], [1.0, 5.0, 0.5], [0.2, 0.5, 6.0]]
    }

    #[test]
    fn small_chol_matches_lapack() {
        let a = spd3();
        let l_lapack = chol_lower(&a, "test").unwrap();
        let l_small = chol_small(&a.view(), "test").unwrap();
        for i in 0..3 {
            for j in 0..=i {
                assert_abs_diff_eq!(l_lapack[[i, j]], l_small[[i, j]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn spd_solve_inverts() {
        let a = spd3();
        let l = chol_lower(&a, "test").unwrap();
        let b = array![1.0, -2.0, 0.5];
        let x = spd_solve(&l, b.view());
        let r = a.dot(&x);
        for i in 0..3 {
            assert_abs_diff_eq!(r[i], b[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn logdet_matches_direct() {
        let a = spd3();
        let l = chol_lower(&a, "test").unwrap();
        // det by cofactor expansion for the 3x3 case
        let det = a[[0, 0]] * (a[[1, 1]] * a[[2, 2]] - a[[1, 2]] * a[[2, 1]])
            - a[[0, 1]] * (a[[1, 0]] * a[[2, 2]] - a[[1, 2]] * a[[2, 0]])
            + a[[0, 2]] * (a[[1, 0]] * a[[2, 1]] - a[[1, 1]] * a[[2, 0]]);
        assert_abs_diff_eq!(spd_logdet(&l), det.ln(), epsilon = 1e-12);
    }

    #[test]
    fn gram_matches_dot() {
        let a = Array2::from_shape_fn((7, 4), |(i, j)| ((i * 13 + j * 7) % 11) as f64 / 3.0 - 1.0);
        let g = gram(&a);
        let d = a.t().dot(&a);
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!(g[[i, j]], d[[i, j]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn inv_small_identity() {
        let a = spd3();
        let inv = inv_small_spd(&a.view(), "test").unwrap();
        let prod = a.dot(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(prod[[i, j]], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn chol_small_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(chol_small(&a.view(), "beta_i").is_err());
    }
}
