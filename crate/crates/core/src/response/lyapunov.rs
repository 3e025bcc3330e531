//! Closed forms for linear systems `dx = A x dt + Σ dW`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Largest real part of the spectrum of `a`.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn check_stable(a: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Dimension("drift matrix must be square".into()));
    }
    let abscissa = spectral_abscissa(a);
    if !(abscissa < 0.0) {
        return Err(Error::AssumptionFailed(format!(
            "drift matrix is not stable (spectral abscissa {abscissa})"
        )));
    }
    Ok(())
}

/// `‖A C + C Aᵀ + Σ Σᵀ‖_F`.
pub fn lyapunov_residual(a: &DMatrix<f64>, sigma: &DMatrix<f64>, c: &DMatrix<f64>) -> f64 {
    (a * c + c * a.transpose() + sigma * sigma.transpose()).norm()
}

/// Stationary covariance: the solution of `A C + C Aᵀ + Σ Σᵀ = 0`, from the
/// vectorised system `(I ⊗ A + A ⊗ I) vec C = −vec(Σ Σᵀ)`.
pub fn stationary_covariance_reference(
    a: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_stable(a)?;
    let d = a.nrows();
    if sigma.nrows() != d {
        return Err(Error::Dimension("noise matrix rows differ from drift size".into()));
    }
    let eye = DMatrix::<f64>::identity(d, d);
    let k = eye.kronecker(a) + a.kronecker(&eye);
    let q = sigma * sigma.transpose();
    // column-major vec
    let rhs = -DMatrix::from_column_slice(d * d, 1, q.as_slice());
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::IllConditioned("Lyapunov operator is singular".into()))?;
    let c = DMatrix::from_column_slice(d, d, sol.as_slice());
    let c = (&c + c.transpose()) * 0.5;
    let res = lyapunov_residual(a, sigma, &c);
    if !(res < 1e-10) {
        return Err(Error::Numerical(format!("Lyapunov residual {res:e} too large")));
    }
    Ok(c)
}

/// Response of `⟨x_i⟩` to constant forcing along `e_j`: entry `(i, j)` of
/// `−A⁻¹`.
pub fn ou_mean_response(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_stable(a)?;
    let inv = a
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::IllConditioned("drift matrix is singular".into()))?;
    Ok(-inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::random_stable_matrix;

    #[test]
    fn scalar_case() {
        let c = stationary_covariance_reference(
            &DMatrix::from_element(1, 1, -1.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!((c[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn commuting_case() {
        let c = stationary_covariance_reference(
            &-DMatrix::<f64>::identity(3, 3),
            &DMatrix::identity(3, 3),
        )
        .unwrap();
        assert!((c - DMatrix::<f64>::identity(3, 3) * 0.5).amax() < 1e-15);
    }

    #[test]
    fn random_stable_residual() {
        for seed in 0..10 {
            let a = random_stable_matrix(4, seed);
            let s = DMatrix::from_fn(4, 2, |i, j| ((i + 2 * j) as f64).cos());
            let c = stationary_covariance_reference(&a, &s).unwrap();
            assert!(lyapunov_residual(&a, &s, &c) < 1e-10);
        }
    }

    #[test]
    fn unstable_refused() {
        let a = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, -1.0]);
        assert!(matches!(
            stationary_covariance_reference(&a, &DMatrix::identity(2, 2)),
            Err(Error::AssumptionFailed(_))
        ));
    }

    #[test]
    fn mean_response_is_negative_inverse() {
        let a = DMatrix::from_element(1, 1, -2.0);
        assert_eq!(ou_mean_response(&a).unwrap()[(0, 0)], 0.5);
    }
}
