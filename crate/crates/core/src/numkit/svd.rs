//! Singular values by one-sided (Hestenes) Jacobi rotations.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 60;

/// Singular values of `m`, descending, `min(rows, cols)` of them.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    if m.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    // Orthogonalise the shorter dimension: each row of `cols_major` is one
    // column of the (possibly transposed) tall matrix.
    let cols_major = if rows >= cols { m.transpose() } else { m.clone() };
    let n = cols_major.rows();
    let len = cols_major.cols();
    let mut work: Vec<Vec<f64>> = cols_major.row_iter().map(|r| r.to_vec()).collect();

    let scale = m.frobenius_norm();
    if scale == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let eps = 1e-15;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&work[p], &work[p]);
                let beta = dot(&work[q], &work[q]);
                let gamma = dot(&work[p], &work[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                // Skip pairs whose contribution is below the rounding floor of the matrix.
                if alpha.max(beta) < (eps * scale).powi(2) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = work.split_at_mut(q);
                let (cp, cq) = (&mut lo[p], &mut hi[0]);
                for i in 0..len {
                    let a = cp[i];
                    let b = cq[i];
                    cp[i] = c * a - s * b;
                    cq[i] = s * a + c * b;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = work.iter().map(|c| dot(c, c).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::PortableRng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = PortableRng::new(seed);
        Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols, 1.0)).unwrap()
    }

    #[test]
    fn identity_and_zero() {
        assert_eq!(singular_values(&Matrix::identity(3)).unwrap(), vec![1.0; 3]);
        assert_eq!(singular_values(&Matrix::zeros(4, 2)).unwrap(), vec![0.0; 2]);
    }

    #[test]
    fn constructed_rank_two_spectrum() {
        // u1 = e1, u2 = (0, 1/√2, 1/√2, 0); v1 = (1,1,1)/√3, v2 = (1,-1,0)/√2.
        let r2 = std::f64::consts::FRAC_1_SQRT_2;
        let r3 = 1.0 / 3f64.sqrt();
        let u1 = [1.0, 0.0, 0.0, 0.0];
        let u2 = [0.0, r2, r2, 0.0];
        let v1 = [r3, r3, r3];
        let v2 = [r2, -r2, 0.0];
        let mut m = Matrix::zeros(4, 3);
        for i in 0..4 {
            for j in 0..3 {
                m[(i, j)] = 3.0 * u1[i] * v1[j] + u2[i] * v2[j];
            }
        }
        let sv = singular_values(&m).unwrap();
        assert_eq!(sv.len(), 3);
        assert!((sv[0] - 3.0).abs() < 1e-9);
        assert!((sv[1] - 1.0).abs() < 1e-9);
        assert!(sv[2].abs() < 1e-9);
    }

    #[test]
    fn frobenius_identity_wide_and_tall() {
        for (r, c, seed) in [(40, 7, 1), (5, 30, 2), (16, 16, 3)] {
            let m = random(r, c, seed);
            let sv = singular_values(&m).unwrap();
            let lhs: f64 = sv.iter().map(|s| s * s).sum();
            let rhs = m.frobenius_norm().powi(2);
            assert!((lhs - rhs).abs() / rhs < 1e-9);
            assert!(sv.windows(2).all(|w| w[0] >= w[1]));
            assert!(sv.iter().all(|&s| s >= 0.0));
        }
    }

    #[test]
    fn transpose_invariant() {
        let m = random(9, 4, 11);
        let a = singular_values(&m).unwrap();
        let b = singular_values(&m.transpose()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut m = Matrix::zeros(2, 2);
        // bypass from_vec validation through IndexMut
        m[(0, 0)] = f64::INFINITY;
        assert!(matches!(singular_values(&m), Err(Error::NonFinite)));
    }
}
