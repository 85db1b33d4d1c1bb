//! Task-specific semantic embedding.
//!
//! Local features of a task are summarised by `k` cluster centroids; every
//! local vector is then described by its cosines to those centroids, and the
//! resulting `H×W×k` map is folded into `(H/2)·(W/2)` positions of `4k`
//! channels by stacking the four spatial quadrants along the channel axis.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{read_tensor, Domain, LocalFeatureMap};
use crate::numkit::{
    cosine_matrix, farthest_first_init, kmeans, max_weight_assignment, norm, singular_values, softmax,
    Matrix,
};
use crate::rng::PortableRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidSource {
    Support,
    Query,
    Merged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticCentroids {
    pub centroids: Matrix,
    pub source: CentroidSource,
    pub task_id: u64,
}

impl SemanticCentroids {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }
}

/// How the separately clustered support and query centroids become one set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    /// One-to-one matching on centroid cosine; each matched pair is averaged.
    #[default]
    MatchAverage,
    /// Support centroids followed by query centroids (`2k` rows).
    Concat,
    SupportOnly,
}

/// Projections for the centroid cross-attention. Identity unless trained
/// weights are supplied.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl AttentionParams {
    pub fn identity(d: usize) -> Self {
        Self {
            w_q: Matrix::identity(d),
            w_k: Matrix::identity(d),
            w_v: Matrix::identity(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    /// Reads `W_Q`, `W_K`, `W_V` stored back to back as three `d×d` tensors.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cur = bytes.as_slice();
        let mut take = || -> Result<Matrix> {
            let blob = read_tensor(&mut cur)?;
            match *blob.dims() {
                [r, c] if r == c => Matrix::from_f32(r, c, blob.data()),
                _ => Err(Error::shape(format!(
                    "attention weight must be square d×d, got {:?}",
                    blob.dims()
                ))),
            }
        };
        let (w_q, w_k, w_v) = (take()?, take()?, take()?);
        if w_k.shape() != w_q.shape() || w_v.shape() != w_q.shape() {
            return Err(Error::shape("attention weights differ in size"));
        }
        Ok(Self { w_q, w_k, w_v })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TseSettings {
    /// Singular values at or above `tau_rel · σ₁` each count as one cluster.
    pub tau_rel: f64,
    pub k_min: usize,
    /// Defaults to `min(d/2, 64)`.
    pub k_max: Option<usize>,
    pub merge: MergeStrategy,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub attention_weights: Option<PathBuf>,
}

impl Default for TseSettings {
    fn default() -> Self {
        Self {
            tau_rel: 0.1,
            k_min: 2,
            k_max: None,
            merge: MergeStrategy::MatchAverage,
            seed: 0x7e5ec5,
            max_iter: 100,
            tol: 1e-4,
            attention_weights: None,
        }
    }
}

impl TseSettings {
    pub fn k_cap(&self, d: usize) -> usize {
        self.k_max.unwrap_or_else(|| (d / 2).min(64)).max(self.k_min)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_rel > 0.0 && self.tau_rel < 1.0) {
            return Err(Error::Config {
                field: "tse.tau_rel",
                reason: format!("must lie in (0, 1), got {}", self.tau_rel),
            });
        }
        if self.k_min < 2 {
            return Err(Error::Config {
                field: "tse.k_min",
                reason: "must be at least 2".into(),
            });
        }
        if let Some(k) = self.k_max {
            if k < self.k_min {
                return Err(Error::Config {
                    field: "tse.k_max",
                    reason: format!("{k} is below k_min {}", self.k_min),
                });
            }
        }
        Ok(())
    }

    pub fn attention_params(&self, d: usize) -> Result<AttentionParams> {
        match &self.attention_weights {
            None => Ok(AttentionParams::identity(d)),
            Some(p) => {
                let params = AttentionParams::load(p)?;
                if params.dim() != d {
                    return Err(Error::shape(format!(
                        "attention weights are {}x{0}, features have d = {d}",
                        params.dim()
                    )));
                }
                Ok(params)
            }
        }
    }
}

/// Number of singular values of the mean-centred `locals` that reach
/// `tau_rel · σ₁`, clamped to `[k_min, k_max]`.
pub fn select_cluster_count(locals: &Matrix, tau_rel: f64, k_min: usize, k_max: usize) -> Result<usize> {
    if !(tau_rel > 0.0 && tau_rel < 1.0) {
        return Err(Error::invalid(format!("tau_rel must lie in (0, 1), got {tau_rel}")));
    }
    if k_min == 0 || k_min > k_max {
        return Err(Error::invalid(format!("bad k range [{k_min}, {k_max}]")));
    }
    if locals.rows() < k_min {
        return Err(Error::invalid(format!(
            "{} local vectors cannot form {k_min} clusters",
            locals.rows()
        )));
    }
    let sv = singular_values(&locals.centered())?;
    let top = sv.first().copied().unwrap_or(0.0);
    // Numerically zero spread: all rows equal.
    if top <= 1e-12 * locals.frobenius_norm().max(1.0) {
        return Ok(k_min);
    }
    let count = sv.iter().filter(|&&s| s >= tau_rel * top).count();
    Ok(count.clamp(k_min, k_max))
}

/// Cross-attention of the current initial centroids over the previous task's
/// centroids: `normalize_rows(C + softmax((C W_Q)(P W_K)ᵀ / √d) · (P W_V))`.
/// An empty history returns `init` unchanged.
pub fn fuse_centroids(init: &Matrix, prev: &Matrix, params: &AttentionParams) -> Result<Matrix> {
    if prev.rows() == 0 {
        return Ok(init.clone());
    }
    let d = init.cols();
    if prev.cols() != d || params.dim() != d {
        return Err(Error::shape(format!(
            "fuse_centroids: init d = {d}, history d = {}, attention d = {}",
            prev.cols(),
            params.dim()
        )));
    }
    let q = init.matmul(&params.w_q)?;
    let k = prev.matmul(&params.w_k)?;
    let v = prev.matmul(&params.w_v)?;
    let mut logits = q.matmul_t(&k)?;
    logits.scale(1.0 / (d as f64).sqrt());
    let mut attn = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        attn.row_mut(i).copy_from_slice(&softmax(logits.row(i)));
    }
    let mixed = attn.matmul(&v)?;
    let mut out = init.clone();
    for i in 0..out.rows() {
        out.row_mut(i).iter_mut().zip(mixed.row(i)).for_each(|(o, m)| *o += m);
    }
    out.normalize_rows();
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ClusterOptions {
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub task_id: u64,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        let s = TseSettings::default();
        Self {
            seed: s.seed,
            max_iter: s.max_iter,
            tol: s.tol,
            task_id: 0,
        }
    }
}

fn side_centroids(
    points: &Matrix,
    k: usize,
    warm: Option<&SemanticCentroids>,
    params: &AttentionParams,
    opts: &ClusterOptions,
    salt: u64,
) -> Result<Matrix> {
    let mut rng = PortableRng::new(opts.seed ^ salt);
    let mut init = farthest_first_init(points, k, &mut rng)?;
    if let Some(w) = warm {
        let fused = fuse_centroids(&init, &w.centroids, params)?;
        // Keep each row at the scale of the data it was drawn from.
        for i in 0..k {
            let scale = norm(init.row(i));
            init.row_mut(i).iter_mut().zip(fused.row(i)).for_each(|(o, f)| *o = f * scale);
        }
    }
    Ok(kmeans(points, k, &init, opts.max_iter, opts.tol)?.centroids)
}

/// Averages each support centroid with its matched query centroid. The pair's
/// direction is the mean of the two unit directions, its length the mean of
/// the two lengths.
fn match_average(support: &Matrix, query: &Matrix) -> Result<Matrix> {
    let sim = cosine_matrix(support, query)?;
    let matched = max_weight_assignment(&sim)?;
    let mut out = Matrix::zeros(support.rows(), support.cols());
    for (i, &j) in matched.iter().enumerate() {
        let (s, q) = (support.row(i), query.row(j));
        let (ns, nq) = (norm(s), norm(q));
        let mut dir: Vec<f64> = s
            .iter()
            .zip(q)
            .map(|(a, b)| a / ns.max(f64::MIN_POSITIVE) + b / nq.max(f64::MIN_POSITIVE))
            .collect();
        let nd = norm(&dir);
        if nd <= 1e-12 {
            out.row_mut(i).copy_from_slice(s);
            continue;
        }
        let len = 0.5 * (ns + nq);
        dir.iter_mut().for_each(|v| *v *= len / nd);
        out.row_mut(i).copy_from_slice(&dir);
    }
    Ok(out)
}

/// Clusters support and query locals separately into `k` groups each and
/// merges the two centroid sets.
pub fn cluster_task(
    support: &Matrix,
    query: &Matrix,
    k: usize,
    warm: Option<&SemanticCentroids>,
    params: &AttentionParams,
    merge: MergeStrategy,
    opts: &ClusterOptions,
) -> Result<SemanticCentroids> {
    if support.cols() != query.cols() {
        return Err(Error::shape("support and query locals differ in d"));
    }
    if support.rows() < k || query.rows() < k {
        return Err(Error::invalid(format!(
            "k = {k} exceeds available locals (support {}, query {})",
            support.rows(),
            query.rows()
        )));
    }
    let warm = warm.filter(|w| w.k() > 0);
    let cs = side_centroids(support, k, warm, params, opts, 0x5)?;
    let centroids = match merge {
        MergeStrategy::SupportOnly => cs,
        MergeStrategy::Concat => {
            let cq = side_centroids(query, k, warm, params, opts, 0x9)?;
            Matrix::vstack([&cs, &cq])?
        }
        MergeStrategy::MatchAverage => {
            let cq = side_centroids(query, k, warm, params, opts, 0x9)?;
            match_average(&cs, &cq)?
        }
    };
    Ok(SemanticCentroids {
        centroids,
        source: match merge {
            MergeStrategy::SupportOnly => CentroidSource::Support,
            _ => CentroidSource::Merged,
        },
        task_id: opts.task_id,
    })
}

/// Per-position cosines to every centroid, `H×W×k`, positions row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineGrid {
    pub h: usize,
    pub w: usize,
    /// `(H·W) × k`.
    pub values: Matrix,
}

impl CosineGrid {
    pub fn k(&self) -> usize {
        self.values.cols()
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.values.row(row * self.w + col)
    }
}

pub fn semantic_map(locals: &Matrix, h: usize, w: usize, centroids: &Matrix) -> Result<CosineGrid> {
    if locals.rows() != h * w {
        return Err(Error::shape(format!(
            "{} local vectors for a {h}x{w} grid",
            locals.rows()
        )));
    }
    if centroids.rows() == 0 || centroids.row_iter().any(|c| norm(c) == 0.0) {
        return Err(Error::invalid("centroids must be non-empty with non-zero rows"));
    }
    Ok(CosineGrid {
        h,
        w,
        values: cosine_matrix(locals, centroids)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ImageRole {
    Support { class: usize, shot: usize },
    QuerySource { index: usize },
    QueryTarget { index: usize },
}

impl ImageRole {
    pub fn domain(&self) -> Domain {
        match self {
            ImageRole::QueryTarget { .. } => Domain::Target,
            _ => Domain::Source,
        }
    }
}

/// Block-split semantic features of one image: `(H/2)·(W/2)` positions × `4k`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticFeatureMap {
    /// Pooled grid size, half the local grid in each direction.
    pub h: usize,
    pub w: usize,
    pub features: Matrix,
    pub owner: ImageRole,
}

impl SemanticFeatureMap {
    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn positions(&self) -> usize {
        self.features.rows()
    }
}

/// Quadrant `q` (0 TL, 1 TR, 2 BL, 3 BR) cell of half-grid position `(i, j)`.
fn quadrant_cell(q: usize, i: usize, j: usize, h2: usize, w2: usize) -> (usize, usize) {
    (i + (q / 2) * h2, j + (q % 2) * w2)
}

/// Folds the grid into its four quadrants; position `(i, j)` of the result is
/// `[TL(i,j) ‖ TR(i,j) ‖ BL(i,j) ‖ BR(i,j)]`.
pub fn block_split_concat(grid: &CosineGrid, owner: ImageRole) -> Result<SemanticFeatureMap> {
    if grid.h % 2 != 0 || grid.w % 2 != 0 {
        return Err(Error::shape(format!(
            "block split needs even H and W, got {}x{}",
            grid.h, grid.w
        )));
    }
    let (h2, w2, k) = (grid.h / 2, grid.w / 2, grid.k());
    let mut features = Matrix::zeros(h2 * w2, 4 * k);
    for i in 0..h2 {
        for j in 0..w2 {
            let row = features.row_mut(i * w2 + j);
            for q in 0..4 {
                let (r, c) = quadrant_cell(q, i, j, h2, w2);
                row[q * k..(q + 1) * k].copy_from_slice(grid.at(r, c));
            }
        }
    }
    Ok(SemanticFeatureMap {
        h: h2,
        w: w2,
        features,
        owner,
    })
}

/// Inverse of [`block_split_concat`].
pub fn block_merge(map: &SemanticFeatureMap) -> Result<CosineGrid> {
    if map.channels() % 4 != 0 {
        return Err(Error::shape("channel count is not divisible by 4"));
    }
    let (h2, w2, k) = (map.h, map.w, map.channels() / 4);
    let (h, w) = (2 * h2, 2 * w2);
    let mut values = Matrix::zeros(h * w, k);
    for i in 0..h2 {
        for j in 0..w2 {
            let src = map.features.row(i * w2 + j);
            for q in 0..4 {
                let (r, c) = quadrant_cell(q, i, j, h2, w2);
                values.row_mut(r * w + c).copy_from_slice(&src[q * k..(q + 1) * k]);
            }
        }
    }
    Ok(CosineGrid { h, w, values })
}

/// `semantic_map` followed by `block_split_concat` for one image.
pub fn embed_image(map: &LocalFeatureMap, centroids: &Matrix, owner: ImageRole) -> Result<SemanticFeatureMap> {
    let (h, w, _) = map.dims();
    block_split_concat(&semantic_map(&map.to_matrix(), h, w, centroids)?, owner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = PortableRng::new(seed);
        Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols, 1.0)).unwrap()
    }

    /// Rows `U diag(s) Vᵀ` with orthonormal `U` (n×r) and `V` (d×r) from
    /// Gram–Schmidt; the centred spectrum is then close to `s` when `U` is
    /// orthogonal to the all-ones vector.
    fn with_spectrum(n: usize, d: usize, spectrum: &[f64], seed: u64) -> Matrix {
        let mut rng = PortableRng::new(seed);
        let ortho = |len: usize, count: usize, rng: &mut PortableRng, first: Option<Vec<f64>>| {
            let mut basis: Vec<Vec<f64>> = first.into_iter().collect();
            while basis.len() < count + usize::from(!basis.is_empty()) {
                let mut v = rng.normal_vec(len, 1.0);
                for b in &basis {
                    let p = crate::numkit::dot(&v, b);
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
                }
                let nv = norm(&v);
                v.iter_mut().for_each(|x| *x /= nv);
                basis.push(v);
            }
            basis
        };
        let ones = vec![1.0 / (n as f64).sqrt(); n];
        let u = ortho(n, spectrum.len(), &mut rng, Some(ones));
        let v = ortho(d, spectrum.len(), &mut rng, None);
        let mut m = Matrix::zeros(n, d);
        for (r, &s) in spectrum.iter().enumerate() {
            for i in 0..n {
                for j in 0..d {
                    m[(i, j)] += s * u[r + 1][i] * v[r][j];
                }
            }
        }
        m
    }

    #[test]
    fn cluster_count_from_constructed_spectrum() {
        let l = with_spectrum(40, 12, &[10.0, 5.0, 1.0, 0.1], 3);
        let sv = singular_values(&l.centered()).unwrap();
        assert!((sv[0] - 10.0).abs() < 1e-9 && (sv[1] - 5.0).abs() < 1e-9);
        assert_eq!(select_cluster_count(&l, 0.2, 1, 6).unwrap(), 2);
        assert_eq!(select_cluster_count(&l, 0.05, 1, 6).unwrap(), 3);
        assert_eq!(select_cluster_count(&l, 0.2, 3, 6).unwrap(), 3);
    }

    #[test]
    fn cluster_count_degenerate_inputs() {
        let same = Matrix::from_rows(&[[1.0, 2.0, 3.0]; 6]).unwrap();
        assert_eq!(select_cluster_count(&same, 0.1, 2, 4).unwrap(), 2);
        let r = random(50, 10, 8);
        assert_eq!(select_cluster_count(&r, 0.999, 2, 5).unwrap(), 2);
        assert!(select_cluster_count(&r, 1.5, 2, 5).is_err());
        assert!(select_cluster_count(&random(1, 3, 1), 0.5, 2, 5).is_err());
    }

    #[test]
    fn cluster_count_invariant_to_row_order_and_rotation() {
        let l = random(60, 8, 21);
        let base = select_cluster_count(&l, 0.3, 1, 8).unwrap();
        let mut idx: Vec<usize> = (0..60).collect();
        PortableRng::new(4).shuffle(&mut idx);
        assert_eq!(select_cluster_count(&l.select_rows(&idx), 0.3, 1, 8).unwrap(), base);
        let rot = crate::synthgen::make_transform(5, 1.0, 8).unwrap();
        // Orthogonal part only: Gram–Schmidt of the transform's rows.
        let mut q = rot.matrix.clone();
        for i in 0..8 {
            for p in 0..i {
                let pr = crate::numkit::dot(q.row(i), q.row(p));
                let prev = q.row(p).to_vec();
                q.row_mut(i).iter_mut().zip(&prev).for_each(|(x, y)| *x -= pr * y);
            }
            let n = norm(q.row(i));
            q.row_mut(i).iter_mut().for_each(|x| *x /= n);
        }
        let rotated = l.matmul(&q).unwrap();
        let a = singular_values(&l.centered()).unwrap();
        let b = singular_values(&rotated.centered()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!(select_cluster_count(&rotated, 0.3, 1, 8).unwrap(), base);
    }

    #[test]
    fn fuse_without_history_is_identity() {
        let c = random(3, 4, 1);
        let out = fuse_centroids(&c, &Matrix::zeros(0, 4), &AttentionParams::identity(4)).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn fuse_orthonormal_keeps_origin_dominant() {
        let d = 6;
        let c = Matrix::identity(d).select_rows(&[0, 1, 2, 3]);
        let out = fuse_centroids(&c, &c, &AttentionParams::identity(d)).unwrap();
        let e = (1.0 / (d as f64).sqrt()).exp();
        let a_self = e / (e + 3.0);
        let a_other = 1.0 / (e + 3.0);
        let expected = (1.0 + a_self) / ((1.0 + a_self).powi(2) + 3.0 * a_other * a_other).sqrt();
        for i in 0..4 {
            let cos = out[(i, i)];
            assert!((cos - expected).abs() < 1e-12);
            assert!(cos >= std::f64::consts::FRAC_1_SQRT_2);
        }
    }

    #[test]
    fn fuse_with_zero_values_normalizes_init() {
        let c = random(3, 5, 2);
        let prev = random(4, 5, 3);
        let mut params = AttentionParams::identity(5);
        params.w_v = Matrix::zeros(5, 5);
        let out = fuse_centroids(&c, &prev, &params).unwrap();
        let mut expect = c.clone();
        expect.normalize_rows();
        assert!(out.max_abs_diff(&expect) < 1e-15);
    }

    fn blobs(seed: u64, n: usize, spread: f64) -> (Matrix, [Vec<f64>; 2]) {
        let mut rng = PortableRng::new(seed);
        let centres = [vec![5.0, 0.0, 1.0], vec![-3.0, 4.0, 0.0]];
        let mut rows = Vec::new();
        for i in 0..n {
            let c = &centres[i % 2];
            rows.push(c.iter().map(|v| v + spread * rng.normal()).collect::<Vec<_>>());
        }
        let m = Matrix::from_rows(&rows).unwrap();
        let means = [0, 1].map(|b| {
            let idx: Vec<usize> = (0..n).filter(|i| i % 2 == b).collect();
            m.select_rows(&idx).column_means()
        });
        (m, means)
    }

    #[test]
    fn identical_support_and_query_blobs() {
        let (pts, means) = blobs(1, 40, 1e-3);
        let params = AttentionParams::identity(3);
        let c = cluster_task(&pts, &pts, 2, None, &params, MergeStrategy::MatchAverage, &ClusterOptions::default()).unwrap();
        assert_eq!(c.k(), 2);
        assert_eq!(c.source, CentroidSource::Merged);
        for m in &means {
            let best = c
                .centroids
                .row_iter()
                .map(|r| crate::numkit::squared_distance(r, m).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "{best}");
        }
    }

    #[test]
    fn support_only_is_support_kmeans() {
        let (s, _) = blobs(2, 30, 0.5);
        let (q, _) = blobs(3, 30, 0.5);
        let params = AttentionParams::identity(3);
        let opts = ClusterOptions::default();
        let c = cluster_task(&s, &q, 2, None, &params, MergeStrategy::SupportOnly, &opts).unwrap();
        let mut rng = PortableRng::new(opts.seed ^ 0x5);
        let init = farthest_first_init(&s, 2, &mut rng).unwrap();
        let direct = kmeans(&s, 2, &init, opts.max_iter, opts.tol).unwrap();
        assert_eq!(c.centroids, direct.centroids);
        let cat = cluster_task(&s, &q, 2, None, &params, MergeStrategy::Concat, &opts).unwrap();
        assert_eq!(cat.k(), 4);
        assert!(cluster_task(&s, &q.select_rows(&[0]), 2, None, &params, MergeStrategy::SupportOnly, &opts).is_err());
    }

    #[test]
    fn match_average_uses_each_query_centroid_once() {
        let s = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap();
        let q = Matrix::from_rows(&[[0.0, 2.0], [-3.0, 0.1], [2.0, 0.1]]).unwrap();
        let m = match_average(&s, &q).unwrap();
        assert_eq!(m.rows(), 3);
        // Row 0 pairs with q[2], row 1 with q[0], row 2 with q[1].
        assert!(m[(0, 0)] > 1.0 && m[(1, 1)] > 1.0 && m[(2, 0)] < -1.0);
    }

    #[test]
    fn semantic_map_cases() {
        let c = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let l = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 5.0]]).unwrap();
        let g = semantic_map(&l, 1, 2, &c).unwrap();
        assert_eq!(g.at(0, 0), &[1.0, 0.0]);
        assert_eq!(g.at(0, 1), &[0.0, 0.0]);
        assert!(semantic_map(&l, 2, 2, &c).is_err());
        assert!(semantic_map(&l, 1, 2, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn semantic_map_matches_naive_loop() {
        let l = random(36, 32, 5);
        let c = random(5, 32, 6);
        let g = semantic_map(&l, 6, 6, &c).unwrap();
        for r in 0..6 {
            for col in 0..6 {
                let v = l.row(r * 6 + col);
                for j in 0..5 {
                    let cj = c.row(j);
                    let mut num = 0.0;
                    let mut nv = 0.0;
                    let mut nc = 0.0;
                    for t in 0..32 {
                        num += v[t] * cj[t];
                        nv += v[t] * v[t];
                        nc += cj[t] * cj[t];
                    }
                    assert_eq!(g.at(r, col)[j], (num / (nv.sqrt() * nc.sqrt())).clamp(-1.0, 1.0));
                }
            }
        }
    }

    #[test]
    fn semantic_map_scale_invariant() {
        let l = random(16, 8, 9);
        let c = random(3, 8, 10);
        let base = semantic_map(&l, 4, 4, &c).unwrap();
        let mut l2 = l.clone();
        l2.scale(3.7);
        let mut c2 = c.clone();
        c2.scale(0.02);
        let scaled = semantic_map(&l2, 4, 4, &c2).unwrap();
        assert!(base.values.max_abs_diff(&scaled.values) < 1e-9);
    }

    #[test]
    fn block_split_minimal_and_odd() {
        let g = CosineGrid {
            h: 2,
            w: 2,
            values: Matrix::from_rows(&[[0.1], [0.2], [0.3], [0.4]]).unwrap(),
        };
        let owner = ImageRole::QuerySource { index: 0 };
        let s = block_split_concat(&g, owner).unwrap();
        assert_eq!(s.positions(), 1);
        assert_eq!(s.features.row(0), &[0.1, 0.2, 0.3, 0.4]);
        let odd = CosineGrid {
            h: 3,
            w: 2,
            values: Matrix::zeros(6, 1),
        };
        assert!(block_split_concat(&odd, owner).is_err());
    }

    #[test]
    fn block_split_preserves_multiset() {
        let g = CosineGrid {
            h: 4,
            w: 4,
            values: random(16, 3, 12),
        };
        let s = block_split_concat(&g, ImageRole::QueryTarget { index: 1 }).unwrap();
        assert_eq!(s.features.as_slice().len(), 48);
        let mut a = g.values.as_slice().to_vec();
        let mut b = s.features.as_slice().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn block_split_round_trip(h2 in 1usize..5, w2 in 1usize..5, k in 1usize..5, seed in any::<u64>()) {
            let g = CosineGrid { h: 2 * h2, w: 2 * w2, values: random(4 * h2 * w2, k, seed) };
            let owner = ImageRole::Support { class: 0, shot: 0 };
            let back = block_merge(&block_split_concat(&g, owner).unwrap()).unwrap();
            prop_assert_eq!(back, g);
        }
    }
}
