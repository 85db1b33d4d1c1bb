use std::fmt;
use std::str::FromStr;

use crate::engine::pipeline::Pipeline;
use crate::error::{Error, Result};
use crate::feature_store::{Episode, TensorBlob};
use crate::numkit::Matrix;
use crate::selftrain::{promote_and_reclassify, PrototypeSet};
use crate::simpat::class_scores;
use crate::tse::{ImageRole, SemanticCentroids};

/// Intermediate results that can be written out for inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// `k × d` merged centroids.
    Centroids,
    /// One `(H/2) × (W/2) × 4k` tensor per image.
    Semantic,
    /// One `N × K·S` tensor of similarity patterns per query.
    Patterns,
    /// One `N`-vector of class scores per query; target queries after self-training.
    Scores,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Centroids, Stage::Semantic, Stage::Patterns, Stage::Scores];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Centroids => "centroids",
            Stage::Semantic => "semantic",
            Stage::Patterns => "patterns",
            Stage::Scores => "scores",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Stage::ALL.iter().map(|st| st.name()).collect();
            Error::invalid(format!("unknown stage `{s}`; valid stages: {}", valid.join(", ")))
        })
    }
}

fn role_name(role: ImageRole) -> String {
    match role {
        ImageRole::Support { class, shot } => format!("support_c{class}_s{shot}"),
        ImageRole::QuerySource { index } => format!("qs_{index:03}"),
        ImageRole::QueryTarget { index } => format!("qt_{index:03}"),
    }
}

/// Named tensors for `stage`, ready to be written as `<name>.ftns`.
pub fn inspect(
    pipeline: &Pipeline,
    episode: &Episode,
    stage: Stage,
    history: Option<&SemanticCentroids>,
) -> Result<Vec<(String, TensorBlob)>> {
    let feats = pipeline.features(episode, history, 0)?;
    let need_semantic = || {
        feats
            .centroids
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("stage `{stage}` needs semantic features; feature_mode is raw_local")))
    };
    let opts = pipeline.config.patterns;
    match stage {
        Stage::Centroids => Ok(vec![("centroids".into(), TensorBlob::from_matrix(&need_semantic()?.centroids)?)]),
        Stage::Semantic => {
            need_semantic()?;
            feats
                .semantic
                .iter()
                .map(|s| {
                    let data = s.features.as_slice().iter().map(|&v| v as f32).collect();
                    Ok((role_name(s.owner), TensorBlob::new(vec![s.h, s.w, s.channels()], data)?))
                })
                .collect()
        }
        Stage::Patterns => {
            let queries = feats.query_source.iter().map(|q| (q, true)).chain(feats.query_target.iter().map(|q| (q, false)));
            let mut out = Vec::new();
            let (mut si, mut ti) = (0, 0);
            for (q, source) in queries {
                let (_, patterns) = class_scores(q, &feats.support, opts)?;
                let rows: Vec<&[f64]> = patterns.iter().map(|p| p.values.as_slice()).collect();
                let name = if source {
                    si += 1;
                    role_name(ImageRole::QuerySource { index: si - 1 })
                } else {
                    ti += 1;
                    role_name(ImageRole::QueryTarget { index: ti - 1 })
                };
                out.push((name, TensorBlob::from_matrix(&Matrix::from_rows(&rows)?)?));
            }
            Ok(out)
        }
        Stage::Scores => {
            let vector = |v: &[f64]| TensorBlob::new(vec![v.len()], v.iter().map(|&x| x as f32).collect());
            let mut out = Vec::new();
            for (i, q) in feats.query_source.iter().enumerate() {
                let (s, _) = class_scores(q, &feats.support, opts)?;
                out.push((role_name(ImageRole::QuerySource { index: i }), vector(&s.scores)?));
            }
            let refs: Vec<&Matrix> = feats.query_target.iter().collect();
            let target = if pipeline.config.self_training {
                promote_and_reclassify(
                    &refs,
                    PrototypeSet::from_support(&feats.support),
                    &pipeline.config.confidence,
                    pipeline.config.promotion,
                    opts,
                )?
                .final_scores
            } else {
                refs.iter().map(|q| class_scores(q, &feats.support, opts).map(|(s, _)| s)).collect::<Result<_>>()?
            };
            for (i, s) in target.iter().enumerate() {
                out.push((role_name(ImageRole::QueryTarget { index: i }), vector(&s.scores)?));
            }
            Ok(out)
        }
    }
}
