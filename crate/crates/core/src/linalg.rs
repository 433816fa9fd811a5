//! Small dense linear algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub const MAX_CONDITION: f64 = 1e12;

/// Condition number of a symmetric matrix from its eigenvalues.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sym = 0.5 * (m + m.transpose());
    let eig = SymmetricEigen::new(sym);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for v in eig.eigenvalues.iter() {
        lo = lo.min(v.abs());
        hi = hi.max(v.abs());
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = 0.5 * (m + m.transpose());
    let chol = sym
        .cholesky()
        .ok_or_else(|| Error::IllConditioned(format!("{what} is not positive definite")))?;
    Ok(chol.inverse())
}

/// Inverse of a general square matrix, refusing anything with condition
/// number above [`MAX_CONDITION`].
pub fn checked_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let lu = m.clone().lu();
    let inv = lu
        .try_inverse()
        .ok_or_else(|| Error::IllConditioned(format!("{what} is singular")))?;
    let cond = m.norm() * inv.norm();
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::IllConditioned(format!(
            "{what} has condition number {cond:.3e}"
        )));
    }
    Ok(inv)
}

/// Column-major flattening.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.norm().max(f64::MIN_POSITIVE);
    (a - b).norm() / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vec_is_column_major() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vec_of(&m).as_slice(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn inverse_rejects_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(checked_inverse(&m, "m").is_err());
        assert!(spd_inverse(&m, "m").is_err());
        assert!(condition_number(&m) > 1e12);
    }
}
