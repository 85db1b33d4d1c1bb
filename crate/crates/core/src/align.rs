//! Gaussian fits of semantic features and similarity patterns, and the
//! asymmetric KL between them.
//!
//! [`kl_gaussian`]`(A, B)` evaluates
//!
//! ```text
//! ½ ( tr(Σ_A⁻¹ Σ_B) + ln(det Σ_A / det Σ_B) + (μ_A − μ_B)ᵀ Σ_A⁻¹ (μ_A − μ_B) − d )
//! ```
//!
//! which is `KL(N_B ‖ N_A)` in the usual notation.

use crate::error::{Error, Result};
use crate::numkit::{cholesky_logdet, gaussian_moments, Cholesky, Matrix};
use crate::simpat::SimilarityPattern;

#[derive(Clone, Debug)]
pub enum Covariance {
    Full { cov: Matrix, chol: Cholesky },
    Diagonal(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Covariance,
    pub samples: usize,
    pub ridge: f64,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Full-covariance Gaussian from explicit moments.
    pub fn full(mean: Vec<f64>, cov: Matrix) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::shape("covariance does not match mean"));
        }
        let chol = cholesky_logdet(&cov)?;
        Ok(Self {
            mean,
            cov: Covariance::Full { cov, chol },
            samples: 0,
            ridge: 0.0,
        })
    }

    pub fn diagonal(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if var.len() != mean.len() {
            return Err(Error::shape("variance does not match mean"));
        }
        if let Some((i, &v)) = var.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
            return Err(Error::NotPositiveDefinite { pivot: i, value: v });
        }
        Ok(Self {
            mean,
            cov: Covariance::Diagonal(var),
            samples: 0,
            ridge: 0.0,
        })
    }

    pub fn log_det(&self) -> f64 {
        match &self.cov {
            Covariance::Full { chol, .. } => chol.logdet,
            Covariance::Diagonal(v) => v.iter().map(|x| x.ln()).sum(),
        }
    }
}

/// Full-covariance Gaussian over the rows of `samples`.
pub fn fit_full(samples: &Matrix, ridge: f64) -> Result<GaussianStats> {
    let (mean, cov) = gaussian_moments(samples, ridge)?;
    let chol = cholesky_logdet(&cov)?;
    Ok(GaussianStats {
        mean,
        cov: Covariance::Full { cov, chol },
        samples: samples.rows(),
        ridge,
    })
}

/// Diagonal Gaussian (per-coordinate unbiased variance) over the rows.
pub fn fit_diagonal(samples: &Matrix, ridge: f64) -> Result<GaussianStats> {
    let (n, d) = samples.shape();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples, got {n}")));
    }
    if !(ridge >= 0.0) {
        return Err(Error::invalid(format!("ridge must be >= 0, got {ridge}")));
    }
    let mean = samples.column_means();
    let mut var = vec![0.0; d];
    for r in samples.row_iter() {
        for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v = *v / (n - 1) as f64 + ridge);
    Ok(GaussianStats {
        mean,
        cov: Covariance::Diagonal(var),
        samples: n,
        ridge,
    })
}

/// Every spatial position of every map is one sample.
pub fn fit_semantic_gaussian<M: AsRef<Matrix>>(maps: &[M], ridge: f64) -> Result<GaussianStats> {
    let stacked = Matrix::vstack(maps.iter().map(|m| m.as_ref()))?;
    if stacked.rows() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 feature positions, got {}",
            stacked.rows()
        )));
    }
    fit_full(&stacked, ridge)
}

/// Diagonal Gaussian over pattern vectors of one class.
pub fn fit_pattern_gaussian(patterns: &[&SimilarityPattern], ridge: f64) -> Result<GaussianStats> {
    let Some(first) = patterns.first() else {
        return Err(Error::invalid("no patterns"));
    };
    if patterns.iter().any(|p| p.class != first.class) {
        return Err(Error::invalid("patterns from different classes"));
    }
    if patterns.iter().any(|p| p.values.len() != first.values.len()) {
        return Err(Error::shape("patterns differ in length"));
    }
    let rows: Vec<&[f64]> = patterns.iter().map(|p| p.values.as_slice()).collect();
    fit_diagonal(&Matrix::from_rows(&rows)?, ridge)
}

pub fn kl_gaussian(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::shape(format!("KL between dims {d} and {}", b.dim())));
    }
    let diff: Vec<f64> = a.mean.iter().zip(&b.mean).map(|(x, y)| x - y).collect();
    let (trace, quad) = match (&a.cov, &b.cov) {
        (Covariance::Full { chol, .. }, Covariance::Full { cov: cb, .. }) => {
            (chol.trace_inv_times(cb), chol.quad_form(&diff))
        }
        (Covariance::Diagonal(va), Covariance::Diagonal(vb)) => {
            let tr = va.iter().zip(vb).map(|(x, y)| y / x).sum();
            let q = diff.iter().zip(va).map(|(m, v)| m * m / v).sum();
            (tr, q)
        }
        (Covariance::Full { chol, .. }, Covariance::Diagonal(vb)) => {
            let cb = diag_matrix(vb);
            (chol.trace_inv_times(&cb), chol.quad_form(&diff))
        }
        (Covariance::Diagonal(va), Covariance::Full { cov: cb, .. }) => {
            let tr = (0..d).map(|i| cb[(i, i)] / va[i]).sum();
            let q = diff.iter().zip(va).map(|(m, v)| m * m / v).sum();
            (tr, q)
        }
    };
    Ok(0.5 * (trace + a.log_det() - b.log_det() + quad - d as f64))
}

fn diag_matrix(v: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(v.len(), v.len());
    for (i, &x) in v.iter().enumerate() {
        m[(i, i)] = x;
    }
    m
}

/// KL between Gaussians fitted to source-query and target-query semantic features.
pub fn sfa_loss<M: AsRef<Matrix>>(source: &[M], target: &[M], ridge: f64) -> Result<f64> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("both query sets must be non-empty"));
    }
    kl_gaussian(&fit_semantic_gaussian(source, ridge)?, &fit_semantic_gaussian(target, ridge)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpaOutcome {
    pub value: f64,
    /// Classes left out because a side had fewer than two patterns.
    pub skipped: usize,
}

/// Sum over classes of the KL between diagonal fits of the class's source and
/// target patterns. `source[c]` / `target[c]` hold the patterns assigned to
/// class `c`.
pub fn spa_loss(source: &[Vec<&SimilarityPattern>], target: &[Vec<&SimilarityPattern>], ridge: f64) -> Result<SpaOutcome> {
    if source.len() != target.len() {
        return Err(Error::shape("source and target cover different class counts"));
    }
    let mut value = 0.0;
    let mut skipped = 0;
    for (s, t) in source.iter().zip(target) {
        if s.len() < 2 || t.len() < 2 {
            skipped += 1;
            continue;
        }
        value += kl_gaussian(&fit_pattern_gaussian(s, ridge)?, &fit_pattern_gaussian(t, ridge)?)?;
    }
    Ok(SpaOutcome { value, skipped })
}
