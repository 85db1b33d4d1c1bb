//! Deterministic two-domain synthetic episodes with a controllable domain shift.
//!
//! Each class owns `P` part prototypes and a spatial layout template assigning
//! a part to every grid cell. An image copies its class template (a fraction
//! `layout_noise` of cells pick a random part of the class instead), adds a
//! per-image jitter to every part and per-cell pixel noise, and replaces a
//! fraction `ρ` of cells with class-agnostic distractors drawn from a pool
//! shared by all classes. Target-domain images push every cell through one
//! affine [`DomainTransform`]; source images are left untouched.
//!
//! Prototypes and distractors have unit expected norm, so the noise scales are
//! per-coordinate standard deviations against a per-coordinate signal of
//! `1/√d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{Episode, LabeledMap, LocalFeatureMap};
use crate::numkit::{dot, norm, singular_values, Matrix};
use crate::rng::{derive_seed, PortableRng};

const MAX_CONDITION: f64 = 1e3;
/// Expected norm of a part prototype or distractor.
const PROTOTYPE_SCALE: f64 = 1.0;

fn default_layout_noise() -> f64 {
    0.1
}

fn default_episodes() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_way: usize,
    pub k_shot: usize,
    /// Queries per domain, dealt round-robin over the classes.
    pub n_query: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub parts_per_class: usize,
    pub part_noise: f64,
    pub pixel_noise: f64,
    pub shift_strength: f64,
    pub distractor_rate: f64,
    #[serde(default = "default_layout_noise")]
    pub layout_noise: f64,
    /// Number of episodes the `gen` command writes.
    #[serde(default = "default_episodes")]
    pub episodes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_way: 5,
            k_shot: 1,
            n_query: 15,
            h: 10,
            w: 10,
            d: 64,
            parts_per_class: 4,
            part_noise: 0.1,
            pixel_noise: 0.15,
            shift_strength: 0.6,
            distractor_rate: 0.2,
            layout_noise: default_layout_noise(),
            episodes: default_episodes(),
        }
    }
}

fn field_err(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Config {
        field,
        reason: reason.into(),
    }
}

fn unit_interval(field: &'static str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(field_err(field, format!("must lie in [0, 1], got {v}")));
    }
    Ok(())
}

fn non_negative(field: &'static str, v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(field_err(field, format!("must be finite and >= 0, got {v}")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(field_err("n_way", "must be at least 2"));
        }
        if self.k_shot == 0 {
            return Err(field_err("k_shot", "must be at least 1"));
        }
        if self.n_query < self.n_way {
            return Err(field_err("n_query", "must cover every class at least once"));
        }
        if self.h == 0 || self.w == 0 || self.d == 0 {
            return Err(field_err("h", "grid and channel sizes must be positive"));
        }
        if self.parts_per_class == 0 {
            return Err(field_err("parts_per_class", "must be at least 1"));
        }
        if self.h * self.w < self.parts_per_class {
            return Err(field_err("parts_per_class", "H·W must be at least the part count"));
        }
        non_negative("part_noise", self.part_noise)?;
        non_negative("pixel_noise", self.pixel_noise)?;
        unit_interval("shift_strength", self.shift_strength)?;
        unit_interval("distractor_rate", self.distractor_rate)?;
        unit_interval("layout_noise", self.layout_noise)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The same configuration re-rooted at episode `index` of the stream.
    pub fn for_episode(&self, index: u64) -> Self {
        Self {
            seed: derive_seed(self.seed, index),
            ..self.clone()
        }
    }
}

/// Affine map `x ↦ A x + b` applied to every target-domain cell.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainTransform {
    pub matrix: Matrix,
    pub bias: Vec<f64>,
}

impl DomainTransform {
    pub fn identity(d: usize) -> Self {
        Self {
            matrix: Matrix::identity(d),
            bias: vec![0.0; d],
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.matrix.mat_vec(v);
        out.iter_mut().zip(&self.bias).for_each(|(o, b)| *o += b);
        out
    }

    pub fn condition_number(&self) -> f64 {
        let sv = singular_values(&self.matrix).unwrap_or_default();
        match (sv.first(), sv.last()) {
            (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
            _ => f64::INFINITY,
        }
    }
}

/// Haar-ish random orthogonal matrix: Gram–Schmidt on Gaussian rows.
fn random_orthogonal(d: usize, rng: &mut PortableRng) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v = rng.normal_vec(d, 1.0);
        for r in &rows {
            let p = dot(&v, r);
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        rows.push(v);
    }
    Matrix::from_rows(&rows).expect("finite by construction")
}

/// `A = (1−γ)·I + γ·R·S`, `b = γ·r·u` with `R` a random orthogonal matrix,
/// `S = diag(U[0.5, 2])`, `u` a random unit vector and `r ∈ [0, 1)`.
/// Draws are repeated until `cond(A) ≤ 1e3`.
pub fn make_transform(seed: u64, gamma: f64, d: usize) -> Result<DomainTransform> {
    unit_interval("shift_strength", gamma)?;
    if gamma == 0.0 {
        return Ok(DomainTransform::identity(d));
    }
    let mut rng = PortableRng::new(seed);
    loop {
        let rot = random_orthogonal(d, &mut rng);
        let scales: Vec<f64> = (0..d).map(|_| rng.uniform_in(0.5, 2.0)).collect();
        let mut a = Matrix::identity(d);
        a.scale(1.0 - gamma);
        for i in 0..d {
            for j in 0..d {
                a[(i, j)] += gamma * rot[(i, j)] * scales[j];
            }
        }
        let mut dir = rng.normal_vec(d, 1.0);
        let n = norm(&dir).max(f64::MIN_POSITIVE);
        let radius = rng.uniform();
        dir.iter_mut().for_each(|x| *x *= gamma * radius / n);
        let t = DomainTransform { matrix: a, bias: dir };
        if t.condition_number() <= MAX_CONDITION {
            return Ok(t);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellTruth {
    Part { class: usize, part: usize },
    Distractor { index: usize },
}

/// Everything the generator knows that the pipeline must not see.
#[derive(Clone, Debug)]
pub struct SynthTruth {
    /// `[class]` → `P × d` prototypes.
    pub part_prototypes: Vec<Matrix>,
    pub transform: DomainTransform,
    /// Per-cell truth for support images, class-major then shot.
    pub support_cells: Vec<Vec<CellTruth>>,
    pub query_source_cells: Vec<Vec<CellTruth>>,
    pub query_target_cells: Vec<Vec<CellTruth>>,
    pub target_labels: Vec<usize>,
}

struct World {
    cfg: SynthConfig,
    parts: Vec<Matrix>,
    distractors: Matrix,
    templates: Vec<Vec<usize>>,
}

impl World {
    fn new(cfg: &SynthConfig, rng: &mut PortableRng) -> Self {
        let d = cfg.d;
        let p = cfg.parts_per_class;
        let cells = cfg.h * cfg.w;
        let scale = PROTOTYPE_SCALE / (d as f64).sqrt();
        let parts = (0..cfg.n_way)
            .map(|_| Matrix::from_vec(p, d, rng.normal_vec(p * d, scale)).unwrap())
            .collect();
        let pool = p.max(2);
        let distractors = Matrix::from_vec(pool, d, rng.normal_vec(pool * d, scale)).unwrap();
        let templates = (0..cfg.n_way)
            .map(|_| {
                // Every part appears at least once; the rest is uniform.
                let mut t: Vec<usize> = (0..cells).map(|i| if i < p { i } else { rng.below(p) }).collect();
                rng.shuffle(&mut t);
                t
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            parts,
            distractors,
            templates,
        }
    }

    fn image(&self, class: usize, transform: Option<&DomainTransform>, rng: &mut PortableRng) -> (LocalFeatureMap, Vec<CellTruth>) {
        let cfg = &self.cfg;
        let (d, p) = (cfg.d, cfg.parts_per_class);
        let jitter: Vec<Vec<f64>> = (0..p).map(|_| rng.normal_vec(d, cfg.part_noise)).collect();
        let mut data = Vec::with_capacity(cfg.h * cfg.w * d);
        let mut truth = Vec::with_capacity(cfg.h * cfg.w);
        for cell in 0..cfg.h * cfg.w {
            let mut v: Vec<f64>;
            if rng.uniform() < cfg.distractor_rate {
                let idx = rng.below(self.distractors.rows());
                v = self.distractors.row(idx).to_vec();
                truth.push(CellTruth::Distractor { index: idx });
            } else {
                let part = if rng.uniform() < cfg.layout_noise {
                    rng.below(p)
                } else {
                    self.templates[class][cell]
                };
                v = self.parts[class].row(part).to_vec();
                v.iter_mut().zip(&jitter[part]).for_each(|(x, j)| *x += j);
                truth.push(CellTruth::Part { class, part });
            }
            for x in v.iter_mut() {
                *x += cfg.pixel_noise * rng.normal();
            }
            if let Some(t) = transform {
                v = t.apply(&v);
            }
            data.extend(v.into_iter().map(|x| x as f32));
        }
        let map = LocalFeatureMap::new(cfg.h, cfg.w, d, data).expect("finite by construction");
        (map, truth)
    }
}

/// Generates one episode from `cfg.seed`.
pub fn generate_episode(cfg: &SynthConfig) -> Result<(Episode, SynthTruth)> {
    cfg.validate()?;
    let mut rng = PortableRng::new(cfg.seed);
    let transform = make_transform(rng.next_u64(), cfg.shift_strength, cfg.d)?;
    let world = World::new(cfg, &mut rng);

    let mut support = Vec::with_capacity(cfg.n_way);
    let mut support_cells = Vec::new();
    for c in 0..cfg.n_way {
        let mut shots = Vec::with_capacity(cfg.k_shot);
        for _ in 0..cfg.k_shot {
            let (m, t) = world.image(c, None, &mut rng);
            shots.push(m);
            support_cells.push(t);
        }
        support.push(shots);
    }
    let mut query_source = Vec::with_capacity(cfg.n_query);
    let mut query_source_cells = Vec::new();
    for i in 0..cfg.n_query {
        let class = i % cfg.n_way;
        let (map, t) = world.image(class, None, &mut rng);
        query_source.push(LabeledMap { map, class });
        query_source_cells.push(t);
    }
    let mut query_target = Vec::with_capacity(cfg.n_query);
    let mut query_target_cells = Vec::new();
    let mut target_labels = Vec::with_capacity(cfg.n_query);
    for i in 0..cfg.n_query {
        let class = i % cfg.n_way;
        let (map, t) = world.image(class, Some(&transform), &mut rng);
        query_target.push(map);
        query_target_cells.push(t);
        target_labels.push(class);
    }
    let episode = Episode::new(support, query_source, query_target, target_labels.clone())?;
    let truth = SynthTruth {
        part_prototypes: world.parts,
        transform,
        support_cells,
        query_source_cells,
        query_target_cells,
        target_labels,
    };
    Ok((episode, truth))
}
