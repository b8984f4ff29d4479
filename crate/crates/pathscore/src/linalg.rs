//! In-place dense helpers for the small (d_x x d_x) covariance algebra in
//! the particle kernels. Matrices are row-major slices; states are tiny
//! (d_x is 1 in every built-in model) so everything stays allocation-free.

/// Cholesky factorization `a = L L^T` in place (lower triangle; upper left
/// untouched). Returns false if the matrix is not positive definite.
pub(crate) fn cholesky_in_place(a: &mut [f64], d: usize) -> bool {
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return false;
                }
                a[i * d + i] = s.sqrt();
            } else {
                a[i * d + j] = s / a[j * d + j];
            }
        }
    }
    true
}

/// Solves `L L^T x = b` in place given the Cholesky factor.
pub(crate) fn cholesky_solve(l: &[f64], d: usize, b: &mut [f64]) {
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
    for i in (0..d).rev() {
        let mut s = b[i];
        for k in i + 1..d {
            s -= l[k * d + i] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
}

/// `log det(a)` from the Cholesky factor of `a`.
pub(crate) fn cholesky_logdet(l: &[f64], d: usize) -> f64 {
    (0..d).map(|i| l[i * d + i].ln()).sum::<f64>() * 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chol_solve_2x2() {
        // a = [[4, 1], [1, 3]]
        let mut a = [4.0, 1.0, 1.0, 3.0];
        assert!(cholesky_in_place(&mut a, 2));
        let logdet = cholesky_logdet(&a, 2);
        assert!((logdet - (11.0f64).ln()).abs() < 1e-12);
        let mut b = [1.0, 2.0];
        cholesky_solve(&a, 2, &mut b);
        // exact solve of [[4,1],[1,3]] x = [1,2]: x = (1/11) [1, 7]
        assert!((b[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((b[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn chol_rejects_indefinite() {
        let mut a = [1.0, 2.0, 2.0, 1.0];
        assert!(!cholesky_in_place(&mut a, 2));
    }
}
