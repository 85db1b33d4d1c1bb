use std::time::Instant;

use crate::align::{sfa_loss, spa_loss};
use crate::engine::config::{FeatureMode, PipelineConfig};
use crate::error::Result;
use crate::feature_store::Episode;
use crate::numkit::Matrix;
use crate::selftrain::{class_matching_loss, promote_and_reclassify, PrototypeSet};
use crate::simpat::{class_scores, classification_loss, ClassScores, SimilarityPattern};
use crate::tse::{
    cluster_task, embed_image, select_cluster_count, AttentionParams, ClusterOptions, ImageRole,
    SemanticCentroids, SemanticFeatureMap,
};

/// Loss terms of one episode and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub sfa: f64,
    pub spa: f64,
    pub clm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(cls: f64, sfa: f64, spa: f64, clm: f64, cfg: &PipelineConfig) -> Self {
        Self {
            cls,
            sfa,
            spa,
            clm,
            total: cls + cfg.lambda_sfa * sfa + cfg.lambda_spa * spa + cfg.lambda_clm * clm,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeReport {
    pub episode_id: usize,
    pub content_hash: String,
    pub predictions: Vec<usize>,
    pub correct: Vec<bool>,
    pub accuracy: f64,
    /// Target accuracy of the support-only classification, before self-training.
    pub initial_accuracy: f64,
    pub losses: LossBreakdown,
    /// Cluster count; 0 for raw local features.
    pub k: usize,
    pub rounds: usize,
    pub confident_counts: Vec<usize>,
    pub promoted: usize,
    pub promoted_correct: usize,
    pub spa_skipped: usize,
    pub wall_ms: f64,
}

impl EpisodeReport {
    pub fn confident_count(&self) -> usize {
        self.confident_counts.iter().sum()
    }
}

/// Per-image features the classifier works on: block-split semantic maps or
/// raw local features, each as `positions × channels`.
#[derive(Clone, Debug)]
pub struct EpisodeFeatures {
    pub k: usize,
    pub centroids: Option<SemanticCentroids>,
    pub support: Vec<Vec<Matrix>>,
    pub query_source: Vec<Matrix>,
    pub query_target: Vec<Matrix>,
    /// Semantic maps in support, query-source, query-target order (empty in raw mode).
    pub semantic: Vec<SemanticFeatureMap>,
}

/// One configured pipeline; attention weights are loaded once.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    attention: Option<AttentionParams>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let attention = match &config.tse.attention_weights {
            Some(p) => Some(AttentionParams::load(p)?),
            None => None,
        };
        Ok(Self { config, attention })
    }

    fn attention(&self, d: usize) -> Result<AttentionParams> {
        match &self.attention {
            None => Ok(AttentionParams::identity(d)),
            Some(a) if a.dim() == d => Ok(a.clone()),
            Some(a) => Err(crate::error::Error::shape(format!(
                "attention weights are {0}x{0}, features have d = {d}",
                a.dim()
            ))),
        }
    }

    /// Builds the features the classifier consumes. `history` is used only
    /// when cross-attention is on.
    pub fn features(&self, episode: &Episode, history: Option<&SemanticCentroids>, task_id: u64) -> Result<EpisodeFeatures> {
        let cfg = &self.config;
        let support_l: Vec<Vec<Matrix>> = episode
            .support()
            .iter()
            .map(|shots| shots.iter().map(|m| m.to_matrix()).collect())
            .collect();
        let qs_l: Vec<Matrix> = episode.query_source().iter().map(|q| q.map.to_matrix()).collect();
        let qt_l: Vec<Matrix> = episode.query_target().iter().map(|m| m.to_matrix()).collect();

        if cfg.feature_mode == FeatureMode::RawLocal {
            return Ok(EpisodeFeatures {
                k: 0,
                centroids: None,
                support: support_l,
                query_source: qs_l,
                query_target: qt_l,
                semantic: Vec::new(),
            });
        }

        let (_, _, d) = episode.dims();
        let support_stack = Matrix::vstack(support_l.iter().flatten())?;
        // The query side is the unlabelled target set; source queries are
        // embedded but do not shape the centroids.
        let query_stack = Matrix::vstack(&qt_l)?;
        let all = Matrix::vstack([&support_stack, &query_stack])?;
        let k_cap = cfg.tse.k_cap(d).min(support_stack.rows());
        let k = select_cluster_count(&all, cfg.tse.tau_rel, cfg.tse.k_min.min(k_cap), k_cap)?;
        let warm = if cfg.catt { history } else { None };
        let opts = ClusterOptions {
            seed: cfg.tse.seed,
            max_iter: cfg.tse.max_iter,
            tol: cfg.tse.tol,
            task_id,
        };
        let params = self.attention(d)?;
        let centroids = cluster_task(&support_stack, &query_stack, k, warm, &params, cfg.tse.merge, &opts)?;

        let c = &centroids.centroids;
        let mut semantic = Vec::new();
        let mut support = Vec::with_capacity(support_l.len());
        for (class, shots) in episode.support().iter().enumerate() {
            let mut feats = Vec::with_capacity(shots.len());
            for (shot, m) in shots.iter().enumerate() {
                let s = embed_image(m, c, ImageRole::Support { class, shot })?;
                feats.push(s.features.clone());
                semantic.push(s);
            }
            support.push(feats);
        }
        let mut query_source = Vec::new();
        for (index, q) in episode.query_source().iter().enumerate() {
            let s = embed_image(&q.map, c, ImageRole::QuerySource { index })?;
            query_source.push(s.features.clone());
            semantic.push(s);
        }
        let mut query_target = Vec::new();
        for (index, m) in episode.query_target().iter().enumerate() {
            let s = embed_image(m, c, ImageRole::QueryTarget { index })?;
            query_target.push(s.features.clone());
            semantic.push(s);
        }
        Ok(EpisodeFeatures {
            k: centroids.k(),
            centroids: Some(centroids),
            support,
            query_source,
            query_target,
            semantic,
        })
    }

    /// Runs the full per-episode pipeline. Returns the report and the task's
    /// centroids (the next task's history; `None` for raw local features).
    pub fn run_episode(
        &self,
        episode: &Episode,
        episode_id: usize,
        history: Option<&SemanticCentroids>,
    ) -> Result<(EpisodeReport, Option<SemanticCentroids>)> {
        let started = Instant::now();
        let cfg = &self.config;
        let feats = self.features(episode, history, episode_id as u64)?;
        let opts = cfg.patterns;
        let n = episode.n_way();

        // Classification loss on labelled source queries.
        let mut qs_scores = Vec::with_capacity(feats.query_source.len());
        let mut qs_patterns: Vec<Vec<SimilarityPattern>> = Vec::with_capacity(feats.query_source.len());
        for q in &feats.query_source {
            let (s, p) = class_scores(q, &feats.support, opts)?;
            qs_scores.push(s);
            qs_patterns.push(p);
        }
        let qs_labels: Vec<usize> = episode.query_source().iter().map(|q| q.class).collect();
        let l_cls = classification_loss(&qs_scores, &qs_labels)?;

        // Target classification, with or without self-training.
        let qt_refs: Vec<&Matrix> = feats.query_target.iter().collect();
        let mut qt_support_patterns: Vec<Vec<SimilarityPattern>> = Vec::with_capacity(qt_refs.len());
        let mut initial_scores: Vec<ClassScores> = Vec::with_capacity(qt_refs.len());
        for q in &qt_refs {
            let (s, p) = class_scores(q, &feats.support, opts)?;
            initial_scores.push(s);
            qt_support_patterns.push(p);
        }
        let initial_predictions: Vec<usize> = initial_scores.iter().map(|s| s.pos).collect();
        let (predictions, final_scores, rounds, confident_counts, promotions) = if cfg.self_training {
            let out = promote_and_reclassify(
                &qt_refs,
                PrototypeSet::from_support(&feats.support),
                &cfg.confidence,
                cfg.promotion,
                opts,
            )?;
            debug_assert_eq!(out.initial_predictions, initial_predictions);
            let counts = out.confident.iter().map(Vec::len).collect();
            (out.predictions, out.final_scores, out.rounds_used, counts, out.promotions)
        } else {
            (initial_predictions.clone(), initial_scores, 0, vec![0; n], Vec::new())
        };
        let l_clm = class_matching_loss(&final_scores, cfg.margin, cfg.clm_reduction)?;

        // Alignment losses.
        let l_sfa = sfa_loss(&feats.query_source, &feats.query_target, cfg.ridge)?;
        let mut source_groups: Vec<Vec<&SimilarityPattern>> = vec![Vec::new(); n];
        for (p, &y) in qs_patterns.iter().zip(&qs_labels) {
            source_groups[y].push(&p[y]);
        }
        let mut target_groups: Vec<Vec<&SimilarityPattern>> = vec![Vec::new(); n];
        for (p, &y) in qt_support_patterns.iter().zip(&predictions) {
            target_groups[y].push(&p[y]);
        }
        let spa = spa_loss(&source_groups, &target_groups, cfg.ridge)?;
        let losses = LossBreakdown::combine(l_cls, l_sfa, spa.value, l_clm, cfg);

        // Predictions are final; only now consult the held-out labels.
        let held_out = episode.held_out();
        let accuracy = held_out.accuracy(&predictions)?;
        let initial_accuracy = held_out.accuracy(&initial_predictions)?;
        let correct = predictions
            .iter()
            .enumerate()
            .map(|(q, &p)| held_out.count_correct(&[(q, p)]) == 1)
            .collect();
        let claims: Vec<(usize, usize)> = promotions.iter().map(|&(q, c, _)| (q, c)).collect();
        let promoted_correct = held_out.count_correct(&claims);

        let report = EpisodeReport {
            episode_id,
            content_hash: episode.content_hash(),
            predictions,
            correct,
            accuracy,
            initial_accuracy,
            losses,
            k: feats.k,
            rounds,
            confident_counts,
            promoted: claims.len(),
            promoted_correct,
            spa_skipped: spa.skipped,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        Ok((report, feats.centroids))
    }
}
