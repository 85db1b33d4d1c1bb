//! Tensor container format, episode manifests and episode loading.
//!
//! Tensor file layout (all integers little-endian):
//!
//! | bytes        | content                         |
//! |--------------|---------------------------------|
//! | 0..4         | magic `FTNS` (46 54 4E 53)      |
//! | 4            | version, `0x01`                 |
//! | 5            | rank `r`, 1..=4                 |
//! | 6..6+4r      | dims, `u32` each                |
//! | rest         | payload, `f32`, row-major       |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

pub const TENSOR_MAGIC: [u8; 4] = *b"FTNS";
pub const TENSOR_VERSION: u8 = 1;
pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorBlob {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl TensorBlob {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::InvalidTensor(format!(
                "rank must be in 1..={MAX_RANK}, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::InvalidTensor(format!("dims must be positive u32 values: {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::InvalidTensor(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        Self::new(vec![m.rows(), m.cols()], m.as_slice().iter().map(|&v| v as f32).collect())
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn encoded_len(&self) -> usize {
        6 + 4 * self.rank() + 4 * self.data.len()
    }
}

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes).map_err(|source| Error::Io {
            offset: self.written,
            source,
        })?;
        self.written += bytes.len() as u64;
        Ok(())
    }
}

/// Writes `blob` to `sink`; returns the number of bytes written.
pub fn write_tensor<W: Write>(blob: &TensorBlob, sink: W) -> Result<usize> {
    // Blobs are validated on construction; re-check in case of a hand-built header.
    if blob.rank() == 0 || blob.rank() > MAX_RANK {
        return Err(Error::InvalidTensor(format!("rank {} not writable", blob.rank())));
    }
    let mut w = CountingWriter { inner: sink, written: 0 };
    w.put(&TENSOR_MAGIC)?;
    w.put(&[TENSOR_VERSION, blob.rank() as u8])?;
    for &d in &blob.dims {
        w.put(&(d as u32).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(4 * blob.data.len());
    for v in &blob.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.put(&payload)?;
    w.inner.flush().map_err(|source| Error::Io {
        offset: w.written,
        source,
    })?;
    Ok(w.written as usize)
}

/// Reads as many bytes as available up to `buf.len()`; returns the count.
fn read_fully<R: Read>(src: &mut R, buf: &mut [u8], offset: u64) -> Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match src.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(source) => {
                return Err(Error::Io {
                    offset: offset + got as u64,
                    source,
                })
            }
        }
    }
    Ok(got)
}

/// Reads one tensor from `source`. Consumes exactly the tensor's bytes, so
/// several tensors can be read back to back from one stream.
pub fn read_tensor<R: Read>(mut source: R) -> Result<TensorBlob> {
    let mut header = [0u8; 6];
    let got = read_fully(&mut source, &mut header, 0)?;
    if got >= 4 && header[..4] != TENSOR_MAGIC {
        return Err(Error::BadMagic(header[..4].try_into().unwrap()));
    }
    if got < 6 {
        return Err(Error::Truncated {
            expected: 6,
            found: got,
        });
    }
    if header[4] != TENSOR_VERSION {
        return Err(Error::UnsupportedVersion(header[4]));
    }
    let rank = header[5] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::InvalidTensor(format!("rank {rank} out of range")));
    }
    let mut dim_bytes = vec![0u8; 4 * rank];
    let got = read_fully(&mut source, &mut dim_bytes, 6)?;
    if got < dim_bytes.len() {
        return Err(Error::Truncated {
            expected: dim_bytes.len(),
            found: got,
        });
    }
    let dims: Vec<usize> = dim_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::InvalidTensor(format!("dims {dims:?} overflow")))?;
    let mut payload = vec![0u8; 4 * count];
    let got = read_fully(&mut source, &mut payload, 6 + 4 * rank as u64)?;
    if got < payload.len() {
        return Err(Error::Truncated {
            expected: payload.len(),
            found: got,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    TensorBlob::new(dims, data)
}

pub fn save_tensor(path: &Path, blob: &TensorBlob) -> Result<usize> {
    let f = File::create(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    write_tensor(blob, BufWriter::new(f))
}

pub fn load_tensor(path: &Path) -> Result<TensorBlob> {
    let f = File::open(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    read_tensor(BufReader::new(f))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One image's `H×W` grid of `d`-dimensional local feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFeatureMap {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f32>,
}

impl LocalFeatureMap {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 || h * w * d != data.len() {
            return Err(Error::shape(format!(
                "feature map {h}x{w}x{d} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { h, w, d, data })
    }

    pub fn from_blob(blob: TensorBlob) -> Result<Self> {
        match *blob.dims() {
            [h, w, d] => Self::new(h, w, d, blob.into_data()),
            _ => Err(Error::shape(format!(
                "feature map tensor must be rank 3 (H, W, d), got dims {:?}",
                blob.dims()
            ))),
        }
    }

    pub fn to_blob(&self) -> TensorBlob {
        TensorBlob {
            dims: vec![self.h, self.w, self.d],
            data: self.data.clone(),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Locals as an `(H·W) × d` matrix, positions in row-major grid order.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_f32(self.h * self.w, self.d, &self.data).expect("validated on construction")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class: usize,
    pub domain: Domain,
}

/// On-disk description of one episode. Relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeManifest {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub dims: FeatureDims,
    pub support: Vec<ManifestEntry>,
    pub query_source: Vec<ManifestEntry>,
    pub query_target: Vec<ManifestEntry>,
}

fn distinct_classes(entries: &[ManifestEntry]) -> usize {
    let mut cs: Vec<usize> = entries.iter().map(|e| e.class).collect();
    cs.sort_unstable();
    cs.dedup();
    cs.len()
}

impl EpisodeManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_way;
        if n < 2 || self.k_shot == 0 {
            return Err(Error::Manifest(format!(
                "need n_way >= 2 and k_shot >= 1, got {n}-way {}-shot",
                self.k_shot
            )));
        }
        if self.support.len() != n * self.k_shot {
            return Err(Error::Manifest(format!(
                "support has {} entries, expected {n}x{}",
                self.support.len(),
                self.k_shot
            )));
        }
        for c in 0..n {
            let count = self.support.iter().filter(|e| e.class == c).count();
            if count != self.k_shot {
                return Err(Error::Manifest(format!(
                    "support class {c} has {count} shots, expected {}",
                    self.k_shot
                )));
            }
        }
        for (name, set) in [("query_source", &self.query_source), ("query_target", &self.query_target)] {
            if let Some(e) = set.iter().find(|e| e.class >= n) {
                return Err(Error::Manifest(format!("{name} class {} outside 0..{n}", e.class)));
            }
            if distinct_classes(set) != n {
                return Err(Error::Manifest(format!(
                    "{name} references {} classes, expected {n}",
                    distinct_classes(set)
                )));
            }
        }
        Ok(())
    }
}

/// Ground-truth labels of the target queries. Only scoring goes through here;
/// the pipeline never receives this type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeldOutLabels {
    labels: Vec<usize>,
}

impl HeldOutLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fraction of `predictions` that match. Lengths must agree.
    pub fn accuracy(&self, predictions: &[usize]) -> Result<f64> {
        if predictions.len() != self.labels.len() {
            return Err(Error::shape(format!(
                "{} predictions for {} target queries",
                predictions.len(),
                self.labels.len()
            )));
        }
        if predictions.is_empty() {
            return Ok(0.0);
        }
        let hits = predictions.iter().zip(&self.labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / predictions.len() as f64)
    }

    /// Number of `(query, class)` claims that are correct.
    pub fn count_correct(&self, claims: &[(usize, usize)]) -> usize {
        claims
            .iter()
            .filter(|&&(q, c)| self.labels.get(q) == Some(&c))
            .count()
    }

    /// Only for writing labels back out (manifests); never used by the pipeline.
    pub fn export(&self) -> Vec<usize> {
        self.labels.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMap {
    pub map: LocalFeatureMap,
    pub class: usize,
}

/// A loaded N-way K-shot task. Target labels are kept in [`HeldOutLabels`],
/// reachable only through [`Episode::held_out`].
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    support: Vec<Vec<LocalFeatureMap>>,
    query_source: Vec<LabeledMap>,
    query_target: Vec<LocalFeatureMap>,
    held_out: HeldOutLabels,
}

impl Episode {
    pub fn new(
        support: Vec<Vec<LocalFeatureMap>>,
        query_source: Vec<LabeledMap>,
        query_target: Vec<LocalFeatureMap>,
        target_labels: Vec<usize>,
    ) -> Result<Self> {
        let n = support.len();
        if n < 2 {
            return Err(Error::Manifest(format!("need at least 2 classes, got {n}")));
        }
        let k = support[0].len();
        if k == 0 || support.iter().any(|c| c.len() != k) {
            return Err(Error::Manifest("every support class needs the same non-zero shot count".into()));
        }
        if target_labels.len() != query_target.len() {
            return Err(Error::Manifest("one label per target query required".into()));
        }
        if query_source.iter().any(|q| q.class >= n) || target_labels.iter().any(|&c| c >= n) {
            return Err(Error::Manifest(format!("query class outside 0..{n}")));
        }
        let dims = support[0][0].dims();
        let all = support
            .iter()
            .flatten()
            .chain(query_source.iter().map(|q| &q.map))
            .chain(&query_target);
        for m in all {
            if m.dims() != dims {
                return Err(Error::shape(format!(
                    "feature map {:?} differs from {:?}",
                    m.dims(),
                    dims
                )));
            }
        }
        Ok(Self {
            support,
            query_source,
            query_target,
            held_out: HeldOutLabels::new(target_labels),
        })
    }

    pub fn n_way(&self) -> usize {
        self.support.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support[0].len()
    }

    /// `(H, W, d)` shared by every map.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.support[0][0].dims()
    }

    pub fn support(&self) -> &[Vec<LocalFeatureMap>] {
        &self.support
    }

    pub fn query_source(&self) -> &[LabeledMap] {
        &self.query_source
    }

    pub fn query_target(&self) -> &[LocalFeatureMap] {
        &self.query_target
    }

    pub fn held_out(&self) -> &HeldOutLabels {
        &self.held_out
    }

    /// SHA-256 over every map's shape and payload bytes, in a fixed order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |m: &LocalFeatureMap| {
            for d in [m.h, m.w, m.d] {
                h.update((d as u32).to_le_bytes());
            }
            for v in &m.data {
                h.update(v.to_le_bytes());
            }
        };
        self.support.iter().flatten().for_each(&mut feed);
        for q in &self.query_source {
            feed(&q.map);
        }
        self.query_target.iter().for_each(&mut feed);
        for q in &self.query_source {
            h.update((q.class as u32).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_checked(base: &Path, e: &ManifestEntry, dims: FeatureDims) -> Result<LocalFeatureMap> {
    let path = resolve(base, &e.path);
    let map = LocalFeatureMap::from_blob(load_tensor(&path)?)?;
    if map.dims() != (dims.h, dims.w, dims.d) {
        return Err(Error::shape(format!(
            "{} has dims {:?}, manifest declares ({}, {}, {})",
            path.display(),
            map.dims(),
            dims.h,
            dims.w,
            dims.d
        )));
    }
    Ok(map)
}

/// Loads every tensor referenced by `manifest`; relative paths resolve
/// against `base_dir`.
pub fn load_episode(manifest: &EpisodeManifest, base_dir: &Path) -> Result<Episode> {
    manifest.validate()?;
    let dims = manifest.dims;
    let mut support = vec![Vec::with_capacity(manifest.k_shot); manifest.n_way];
    for e in &manifest.support {
        support[e.class].push(load_checked(base_dir, e, dims)?);
    }
    let query_source = manifest
        .query_source
        .iter()
        .map(|e| {
            Ok(LabeledMap {
                map: load_checked(base_dir, e, dims)?,
                class: e.class,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let query_target = manifest
        .query_target
        .iter()
        .map(|e| load_checked(base_dir, e, dims))
        .collect::<Result<Vec<_>>>()?;
    let labels = manifest.query_target.iter().map(|e| e.class).collect();
    Episode::new(support, query_source, query_target, labels)
}

/// Reads the manifest at `path` and loads the episode next to it.
pub fn load_episode_file(path: &Path) -> Result<Episode> {
    let manifest = EpisodeManifest::read(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    load_episode(&manifest, base)
}

/// Writes every map of `episode` plus `manifest.json` into `dir`.
pub fn save_episode(episode: &Episode, dir: &Path) -> Result<EpisodeManifest> {
    std::fs::create_dir_all(dir).map_err(|source| Error::File {
        path: dir.to_path_buf(),
        source,
    })?;
    let (h, w, d) = episode.dims();
    let write = |name: String, map: &LocalFeatureMap, class: usize, domain: Domain| -> Result<ManifestEntry> {
        save_tensor(&dir.join(&name), &map.to_blob())?;
        Ok(ManifestEntry {
            path: PathBuf::from(name),
            class,
            domain,
        })
    };
    let mut support = Vec::new();
    for (c, shots) in episode.support.iter().enumerate() {
        for (s, m) in shots.iter().enumerate() {
            support.push(write(format!("support_c{c}_s{s}.ftns"), m, c, Domain::Source)?);
        }
    }
    let mut query_source = Vec::new();
    for (i, q) in episode.query_source.iter().enumerate() {
        query_source.push(write(format!("qs_{i:03}.ftns"), &q.map, q.class, Domain::Source)?);
    }
    let labels = episode.held_out.export();
    let mut query_target = Vec::new();
    for (i, m) in episode.query_target.iter().enumerate() {
        query_target.push(write(format!("qt_{i:03}.ftns"), m, labels[i], Domain::Target)?);
    }
    let manifest = EpisodeManifest {
        n_way: episode.n_way(),
        k_shot: episode.k_shot(),
        n_query: episode.query_target.len(),
        dims: FeatureDims { h, w, d },
        support,
        query_source,
        query_target,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, manifest.to_json()?).map_err(|source| Error::File { path, source })?;
    Ok(manifest)
}
