use super::matrix::{dot, norm, Matrix};
use crate::error::{Error, Result};

/// Lower Cholesky factor together with `ln det` of the factored matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    pub lower: Matrix,
    pub logdet: f64,
}

pub fn cholesky_logdet(sigma: &Matrix) -> Result<Cholesky> {
    let (n, m) = sigma.shape();
    if n != m {
        return Err(Error::shape(format!("cholesky needs a square matrix, got {n}x{m}")));
    }
    let scale = sigma.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::invalid(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = sigma[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = sigma[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    let logdet = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
    Ok(Cholesky { lower: l, logdet })
}

impl Cholesky {
    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// Solves `L y = b`.
    pub fn forward(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let s = b[i] - dot(&self.lower.row(i)[..i], &y[..i]);
            y[i] = s / self.lower[(i, i)];
        }
        y
    }

    /// Solves `Lᵀ x = y`.
    pub fn backward(&self, y: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.lower[(k, i)] * x[k];
            }
            x[i] = s / self.lower[(i, i)];
        }
        x
    }

    /// Solves `Σ x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.backward(&self.forward(b))
    }

    /// `vᵀ Σ⁻¹ v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        let y = self.forward(v);
        dot(&y, &y)
    }

    /// `tr(Σ⁻¹ B)` for symmetric `B`, via `‖L⁻¹ C‖_F²` with `B = C Cᵀ` avoided:
    /// computed column by column as `Σ_j (Σ⁻¹ B)_jj`.
    pub fn trace_inv_times(&self, b: &Matrix) -> f64 {
        let n = self.dim();
        let mut tr = 0.0;
        let mut col = vec![0.0; n];
        for j in 0..n {
            for (i, c) in col.iter_mut().enumerate() {
                *c = b[(i, j)];
            }
            tr += self.solve(&col)[j];
        }
        tr
    }
}

/// Column mean and unbiased covariance plus `ridge` on the diagonal.
pub fn gaussian_moments(samples: &Matrix, ridge: f64) -> Result<(Vec<f64>, Matrix)> {
    let (n, d) = samples.shape();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples, got {n}")));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::invalid(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let mean = samples.column_means();
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in samples.row_iter() {
        for ((c, v), m) in centered.iter_mut().zip(r).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = cov.row_mut(i);
            for j in i..d {
                row[j] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
        cov[(i, i)] += ridge;
    }
    Ok((mean, cov))
}

/// Pairwise cosines between rows of `a` and rows of `b`, clamped to `[-1, 1]`.
/// A zero row has cosine 0 against everything.
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape(format!(
            "cosine_matrix column mismatch: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let an: Vec<f64> = a.row_iter().map(norm).collect();
    let bn: Vec<f64> = b.row_iter().map(norm).collect();
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for (i, ra) in a.row_iter().enumerate() {
        if an[i] == 0.0 {
            continue;
        }
        let orow = out.row_mut(i);
        for (j, rb) in b.row_iter().enumerate() {
            if bn[j] == 0.0 {
                continue;
            }
            orow[j] = (dot(ra, rb) / (an[i] * bn[j])).clamp(-1.0, 1.0);
        }
    }
    Ok(out)
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `ln Σ exp(v)`, stable.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::singular_values;
    use crate::rng::PortableRng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = PortableRng::new(seed);
        Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols, 1.0)).unwrap()
    }

    #[test]
    fn moments_hand_example() {
        let s = Matrix::from_rows(&[[0.0, 0.0], [2.0, 2.0]]).unwrap();
        let (mu, cov) = gaussian_moments(&s, 0.0).unwrap();
        assert_eq!(mu, vec![1.0, 1.0]);
        assert_eq!(cov.as_slice(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn moments_match_two_pass_oracle() {
        let s = random(500, 3, 5);
        let (mu, cov) = gaussian_moments(&s, 0.0).unwrap();
        // Independent two-pass: sum for the mean, then per-entry sum of products.
        let n = s.rows() as f64;
        for j in 0..3 {
            let m: f64 = (0..s.rows()).map(|i| s[(i, j)]).sum::<f64>() / n;
            assert!((m - mu[j]).abs() < 1e-10);
        }
        for a in 0..3 {
            for b in 0..3 {
                let mut acc = 0.0;
                for i in 0..s.rows() {
                    acc += (s[(i, a)] - mu[a]) * (s[(i, b)] - mu[b]);
                }
                assert!((acc / (n - 1.0) - cov[(a, b)]).abs() < 1e-10);
            }
        }
        assert!(gaussian_moments(&random(1, 3, 1), 0.0).is_err());
    }

    #[test]
    fn ridge_makes_rank_deficient_pd() {
        // All samples on a line: rank-1 covariance.
        let s = Matrix::from_rows(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [3.0, 6.0, 9.0]]).unwrap();
        let (_, singular) = gaussian_moments(&s, 0.0).unwrap();
        assert!(cholesky_logdet(&singular).is_err());
        let (_, cov) = gaussian_moments(&s, 1e-4).unwrap();
        assert!(cholesky_logdet(&cov).is_ok());
    }

    #[test]
    fn cholesky_diag_and_indefinite() {
        let d = Matrix::from_rows(&[[4.0, 0.0], [0.0, 9.0]]).unwrap();
        let c = cholesky_logdet(&d).unwrap();
        assert!((c.logdet - 36f64.ln()).abs() < 1e-14);
        let bad = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        match cholesky_logdet(&bad) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected non-PD error, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_reconstructs_and_matches_spectrum() {
        let a = random(5, 5, 9);
        let mut sigma = a.transpose().matmul(&a).unwrap();
        for i in 0..5 {
            sigma[(i, i)] += 1.0;
        }
        let c = cholesky_logdet(&sigma).unwrap();
        let back = c.lower.matmul_t(&c.lower).unwrap();
        let rel = back.max_abs_diff(&sigma) / sigma.frobenius_norm();
        assert!(rel < 1e-8);
        // For SPD matrices the singular values are the eigenvalues.
        let spectral: f64 = singular_values(&sigma).unwrap().iter().map(|s| s.ln()).sum();
        assert!((spectral - c.logdet).abs() < 1e-8);
        let b = [1.0, -2.0, 0.5, 3.0, 0.0];
        let x = c.solve(&b);
        let bx = sigma.mat_vec(&x);
        for (u, v) in bx.iter().zip(&b) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_cases() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [3.0, 4.0], [0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0, 1.0], [3.0, 4.0]]).unwrap();
        let c = cosine_matrix(&a, &b).unwrap();
        assert_eq!(c[(0, 0)], 0.0);
        assert!((c[(1, 1)] - 1.0).abs() < 1e-15);
        assert_eq!(c.row(2), &[0.0, 0.0]);
        assert!(cosine_matrix(&a, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn cosine_matches_naive_loop() {
        let a = random(20, 8, 1);
        let b = random(30, 8, 2);
        let c = cosine_matrix(&a, &b).unwrap();
        for i in 0..20 {
            for j in 0..30 {
                let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                for t in 0..8 {
                    ab += a[(i, t)] * b[(j, t)];
                    aa += a[(i, t)] * a[(i, t)];
                    bb += b[(j, t)] * b[(j, t)];
                }
                let naive = (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0);
                assert_eq!(naive, c[(i, j)]);
            }
        }
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 0.0]);
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1e-300);
        let v = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = v.iter().map(|x| x + 123.4).collect();
        for (a, b) in softmax(&v).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((softmax(&v).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
