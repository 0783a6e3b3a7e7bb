//! Dense linear-algebra helpers shared by the operator modules.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))?;
    let inv = chol.inverse();
    Ok(symmetrize(&inv))
}

/// `log det` of a symmetric positive definite matrix via Cholesky.
pub fn spd_logdet(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Symmetric square root by eigendecomposition; eigenvalues below `-tol`
/// are an error, small negatives are clamped to zero.
pub fn sym_sqrt(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -tol {
            return Err(Error::Singular(format!("eigenvalue {v} below zero")));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(symmetrize(&(q * DMatrix::from_diagonal(&vals) * q.transpose())))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Largest singular value.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Largest eigenvalue modulus of a general square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().fold(0.0_f64, |a, z| a.max(z.norm()))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

pub fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logdet_matches_eigenvalues() {
        let m = DMatrix::<f64>::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let by_eig: f64 = m.clone().symmetric_eigen().eigenvalues.iter().map(|v| v.ln()).sum();
        assert!((spd_logdet(&m, "m").unwrap() - by_eig).abs() < 1e-12);
        let inv = spd_inverse(&m, "m").unwrap();
        assert!(max_abs_diff(&(&m * inv), &DMatrix::identity(3, 3)) < 1e-12);
    }

    #[test]
    fn sqrt_of_diagonal_is_elementwise() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0, 0.25]));
        let s = sym_sqrt(&m, 1e-12).unwrap();
        assert!(max_abs_diff(&s, &DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0, 0.5]))) < 1e-12);
        assert!(sym_sqrt(&(-m), 1e-12).is_err());
    }

    #[test]
    fn indefinite_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(spd_inverse(&m, "m").is_err());
        assert!(spd_logdet(&m, "m").is_err());
    }
}
