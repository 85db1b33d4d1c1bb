//! Episode orchestration: per-task pipeline, multi-task evaluation and the
//! module ablation grid.

mod config;
mod inspect;
mod pipeline;
mod report;
mod source;

pub use config::{FeatureMode, PipelineConfig, Toggles};
pub use inspect::{inspect, Stage};
pub use pipeline::{EpisodeFeatures, EpisodeReport, LossBreakdown, Pipeline};
pub use report::{AblationRow, AblationTable, RunReport};
pub use source::{DirSource, EpisodeSource, SynthSource};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tse::SemanticCentroids;

/// Runs `tasks` episodes from `source` under `cfg`.
///
/// With cross-attention on, each task is warm-started from the previous
/// task's centroids, so episodes run in order; otherwise they run in
/// parallel. A failing episode is recorded and, under cross-attention, the
/// history is carried past it unchanged.
pub fn evaluate(source: &dyn EpisodeSource, tasks: usize, cfg: &PipelineConfig) -> Result<RunReport> {
    if let Some(n) = source.len() {
        if tasks > n {
            return Err(Error::invalid(format!("{tasks} tasks requested, source has {n}")));
        }
    }
    let pipeline = Pipeline::new(cfg.clone())?;
    let chained = cfg.catt && cfg.feature_mode == FeatureMode::Semantic;

    let results: Vec<Result<EpisodeReport>> = if chained {
        let mut history: Option<SemanticCentroids> = None;
        (0..tasks)
            .map(|i| {
                let ep = source.episode(i)?;
                let (report, centroids) = pipeline.run_episode(&ep, i, history.as_ref())?;
                if centroids.is_some() {
                    history = centroids;
                }
                Ok(report)
            })
            .collect()
    } else {
        (0..tasks)
            .into_par_iter()
            .map(|i| {
                let ep = source.episode(i)?;
                pipeline.run_episode(&ep, i, None).map(|(r, _)| r)
            })
            .collect()
    };

    let mut episodes = Vec::with_capacity(tasks);
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rep) => episodes.push(rep),
            Err(e) => {
                log::warn!("episode {i} failed: {e}");
                failures.push((i, e.to_string()));
            }
        }
    }
    let fingerprint = fingerprint(source, cfg, &episodes, &failures);
    Ok(RunReport::from_episodes(cfg.variant_label(), episodes, failures, fingerprint))
}

/// Digest over the configuration, the source and every deterministic
/// per-episode output. Timing is excluded.
fn fingerprint(source: &dyn EpisodeSource, cfg: &PipelineConfig, episodes: &[EpisodeReport], failures: &[(usize, String)]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(cfg).unwrap_or_default());
    h.update(source.describe());
    for e in episodes {
        h.update((e.episode_id as u64).to_le_bytes());
        h.update(&e.content_hash);
        for &p in &e.predictions {
            h.update((p as u64).to_le_bytes());
        }
        let l = &e.losses;
        for v in [e.accuracy, l.cls, l.sfa, l.spa, l.clm, l.total] {
            h.update(v.to_bits().to_le_bytes());
        }
        for v in [e.k, e.rounds, e.promoted] {
            h.update((v as u64).to_le_bytes());
        }
    }
    for (i, msg) in failures {
        h.update((*i as u64).to_le_bytes());
        h.update(msg);
    }
    hex::encode(h.finalize())
}

/// Evaluates every toggle set in `grid` on the same `tasks` episodes.
/// Fails if any two rows saw different episode content.
pub fn ablate(source: &dyn EpisodeSource, base: &PipelineConfig, grid: &[Toggles], tasks: usize) -> Result<AblationTable> {
    let mut rows: Vec<AblationRow> = Vec::with_capacity(grid.len());
    for &t in grid {
        let report = evaluate(source, tasks, &base.with_toggles(t))?;
        if let Some(first) = rows.first() {
            check_pairing(&first.report, &report)?;
        }
        rows.push(AblationRow { toggles: t, report });
    }
    Ok(AblationTable { rows })
}

fn check_pairing(a: &RunReport, b: &RunReport) -> Result<()> {
    let index = |r: &RunReport| -> Vec<(usize, String)> {
        r.episodes.iter().map(|e| (e.episode_id, e.content_hash.clone())).collect()
    };
    let (ia, ib) = (index(a), index(b));
    for (x, y) in ia.iter().zip(&ib) {
        if x.0 == y.0 && x.1 != y.1 {
            return Err(Error::invalid(format!(
                "ablation rows saw different content for episode {}",
                x.0
            )));
        }
    }
    Ok(())
}
