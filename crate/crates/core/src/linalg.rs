use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solve a square system, failing when it is numerically singular.
pub(crate) fn solve_square(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    if ratio < 1e-15 {
        return Err(Error::SingularJacobian { ratio });
    }
    a.clone().lu().solve(b).ok_or(Error::SingularJacobian { ratio })
}

/// Minimum-norm least-squares solution; singular values below
/// `rcond · σ_max` are discarded.
pub(crate) fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>, rcond: f64) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let eps = rcond * svd.singular_values.max();
    svd.solve(b, eps).map_err(|e| Error::Precondition(e.to_string()))
}

/// Unit vector spanning the null space of an `n × (n+1)` matrix.
pub(crate) fn null_vector(a: &DMatrix<f64>) -> DVector<f64> {
    let (n, c) = a.shape();
    let mut padded = DMatrix::zeros(c.max(n), c);
    padded.view_mut((0, 0), (n, c)).copy_from(a);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("requested");
    vt.row(vt.nrows() - 1).transpose().normalize()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_vector_of_wide_matrix() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 0.0, 1.0, 1.0]);
        let v = null_vector(&a);
        assert!((&a * &v).norm() < 1e-14);
        assert!((v.norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn min_norm_solution_is_orthogonal_to_null_space() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let x = min_norm_solve(&a, &DVector::from_vec(vec![2.0]), 1e-12).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_square_system_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(solve_square(&a, &DVector::from_vec(vec![1.0, 1.0])).is_err());
    }
}
