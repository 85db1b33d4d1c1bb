//! Image-to-class similarity: per-shot cosine tensors, pooled similarity
//! patterns, class scores and the cross-entropy classification loss.
//!
//! All functions take feature grids as `positions × channels` matrices so the
//! same code scores block-split semantic maps and raw local features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{cosine_matrix, log_sum_exp, Matrix};

/// Which side the max is taken over when a cosine tensor is pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// One entry per support position: the best-matching query position.
    #[default]
    SupportSide,
    /// One entry per query position: the best-matching support position.
    QuerySide,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNorm {
    /// Pattern mean, in `[-1, 1]`.
    #[default]
    Mean,
    /// Plain sum `1 · p`.
    RawSum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternOptions {
    pub pooling: Pooling,
    pub normalization: ScoreNorm,
}

/// `K × S_q × S_s` cosines between one query and the `K` shots of a class.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTensor {
    /// One `S_q × S_s` matrix per shot.
    pub shots: Vec<Matrix>,
}

impl SimilarityTensor {
    pub fn get(&self, shot: usize, q: usize, s: usize) -> f64 {
        self.shots[shot][(q, s)]
    }
}

pub fn similarity_matrix<'a, I>(query: &Matrix, support_class: I) -> Result<SimilarityTensor>
where
    I: IntoIterator<Item = &'a Matrix>,
{
    let shots = support_class
        .into_iter()
        .map(|s| {
            if s.cols() != query.cols() {
                return Err(Error::shape(format!(
                    "query has {} channels, support shot has {}",
                    query.cols(),
                    s.cols()
                )));
            }
            cosine_matrix(query, s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityTensor { shots })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityPattern {
    pub class: usize,
    /// Concatenation of the per-shot parts, shot order preserved.
    pub values: Vec<f64>,
    pub part_len: usize,
}

impl SimilarityPattern {
    pub fn parts(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.part_len.max(1))
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn score(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.sum() / self.values.len() as f64
        }
    }
}

pub fn similarity_pattern(m: &SimilarityTensor, class: usize, pooling: Pooling) -> SimilarityPattern {
    let mut values = Vec::new();
    let mut part_len = 0;
    for shot in &m.shots {
        let (sq, ss) = shot.shape();
        match pooling {
            Pooling::SupportSide => {
                part_len = ss;
                for b in 0..ss {
                    let best = (0..sq).map(|a| shot[(a, b)]).fold(f64::NEG_INFINITY, f64::max);
                    values.push(best);
                }
            }
            Pooling::QuerySide => {
                part_len = sq;
                for a in 0..sq {
                    values.push(shot.row(a).iter().copied().fold(f64::NEG_INFINITY, f64::max));
                }
            }
        }
    }
    SimilarityPattern {
        class,
        values,
        part_len,
    }
}

/// Per-class scores for one query with the top two classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub scores: Vec<f64>,
    /// Unnormalised `1 · p` per class.
    pub sums: Vec<f64>,
    pub pos: usize,
    pub neg: usize,
}

impl ClassScores {
    /// Ranks `scores`; ties go to the lower class index.
    pub fn from_scores(scores: Vec<f64>, sums: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let pos = order.first().copied().unwrap_or(0);
        let neg = order.get(1).copied().unwrap_or(pos);
        Self { scores, sums, pos, neg }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        crate::numkit::softmax(&self.scores)
    }
}

/// Scores one query against every class; also returns the per-class patterns.
pub fn class_scores<S: AsRef<Matrix>>(
    query: &Matrix,
    supports: &[Vec<S>],
    opts: PatternOptions,
) -> Result<(ClassScores, Vec<SimilarityPattern>)> {
    if supports.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {}", supports.len())));
    }
    let mut patterns = Vec::with_capacity(supports.len());
    for (c, shots) in supports.iter().enumerate() {
        if shots.is_empty() {
            return Err(Error::invalid(format!("class {c} has no prototypes")));
        }
        let m = similarity_matrix(query, shots.iter().map(|s| s.as_ref()))?;
        patterns.push(similarity_pattern(&m, c, opts.pooling));
    }
    let sums: Vec<f64> = patterns.iter().map(|p| p.sum()).collect();
    let scores = match opts.normalization {
        ScoreNorm::Mean => patterns.iter().map(|p| p.score()).collect(),
        ScoreNorm::RawSum => sums.clone(),
    };
    Ok((ClassScores::from_scores(scores, sums), patterns))
}

/// Mean negative log-softmax of the true class over the class scores.
pub fn classification_loss(scores: &[ClassScores], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (s, &y) in scores.iter().zip(labels) {
        if y >= s.scores.len() {
            return Err(Error::invalid(format!(
                "label {y} outside 0..{}",
                s.scores.len()
            )));
        }
        total += log_sum_exp(&s.scores) - s.scores[y];
    }
    Ok((total / scores.len() as f64).max(0.0))
}
