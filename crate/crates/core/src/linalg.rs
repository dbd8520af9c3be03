use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Diagonal jitter added on the single retry after a failed factorization.
pub const SPD_JITTER: f64 = 1e-10;

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let (n, m) = a.dims2();
    if n != m {
        return Err(Error::dim("cholesky", format!("{n}x{m} is not square")));
    }
    a.ensure_finite("cholesky input")?;
    let sym_tol = 1e-9 * a.data().iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            if (a.at(i, j) - a.at(j, i)).abs() > sym_tol {
                return Err(Error::Contract(format!("matrix is not symmetric at ({i},{j})")));
            }
        }
    }
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = a.at(j, j);
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::Factorization { pivot: j, value: diag });
        }
        let d = diag.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(Tensor::matrix(n, n, l))
}

/// Solve `A X = B` for symmetric positive definite `A`.
///
/// A failed factorization is retried once with [`SPD_JITTER`] on the diagonal.
pub fn solve_spd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    let (bn, m) = b.dims2();
    if bn != n {
        return Err(Error::dim("solve_spd", format!("A is {n}x{n}, B has {bn} rows")));
    }
    b.ensure_finite("solve_spd right-hand side")?;
    let l = match cholesky(a) {
        Ok(l) => l,
        Err(Error::Factorization { .. }) => {
            let mut jittered = a.clone();
            for i in 0..n {
                jittered.data_mut()[i * n + i] += SPD_JITTER;
            }
            cholesky(&jittered)?
        }
        Err(e) => return Err(e),
    };
    let ld = l.data();
    let mut x = b.data().to_vec();
    for col in 0..m {
        // L y = b
        for i in 0..n {
            let mut s = x[i * m + col];
            for k in 0..i {
                s -= ld[i * n + k] * x[k * m + col];
            }
            x[i * m + col] = s / ld[i * n + i];
        }
        // L^T x = y
        for i in (0..n).rev() {
            let mut s = x[i * m + col];
            for k in i + 1..n {
                s -= ld[k * n + i] * x[k * m + col];
            }
            x[i * m + col] = s / ld[i * n + i];
        }
    }
    Ok(Tensor::matrix(n, m, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn identity_system() {
        let mut rng = Rng::new(2);
        let b = rng.normal_matrix(4, 3, 1.0);
        let x = solve_spd(&Tensor::eye(4), &b).unwrap();
        assert!(x.max_abs_diff(&b) == 0.0);
    }

    #[test]
    fn diagonal_system() {
        let a = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0], vec![8.0]]).unwrap();
        let x = solve_spd(&a, &b).unwrap();
        assert!((x.data()[0] - 1.0).abs() < 1e-15);
        assert!((x.data()[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn random_spd_residual() {
        let mut rng = Rng::new(4);
        let g = rng.normal_matrix(8, 8, 1.0);
        let mut a = g.transpose().matmul(&g).unwrap();
        for i in 0..8 {
            a.data_mut()[i * 8 + i] += 0.5;
        }
        let b = rng.normal_matrix(8, 3, 1.0);
        let x = solve_spd(&a, &b).unwrap();
        let resid = a.matmul(&x).unwrap().sub(&b).unwrap().frobenius_norm();
        assert!(resid <= 1e-9 * b.frobenius_norm(), "residual {resid}");
    }

    #[test]
    fn indefinite_matrix_fails() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let b = Tensor::zeros(2, 1);
        assert!(matches!(solve_spd(&a, &b), Err(Error::Factorization { .. })));
    }

    #[test]
    fn singular_psd_recovers_with_jitter() {
        // rank-1 PSD matrix: the plain factorization hits a zero pivot.
        let a = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let x = solve_spd(&a, &b).unwrap();
        assert!(x.is_finite());
    }

    #[test]
    fn asymmetric_matrix_is_rejected() {
        let a = Tensor::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(solve_spd(&a, &Tensor::zeros(2, 1)), Err(Error::Contract(_))));
    }
}
