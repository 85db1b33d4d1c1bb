//! Cross-domain self-training.
//!
//! Target queries the current prototypes classify with enough confidence are
//! promoted to prototypes of their predicted class, and the target set is
//! classified again. Labels of target queries are never consulted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::simpat::{class_scores, ClassScores, PatternOptions};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMeasure {
    /// `exp(s_pos − s_neg) ≥ θ`.
    #[default]
    ScoreRatio,
    /// `s_pos − s_neg ≥ θ`.
    ScoreMargin,
    /// Unnormalised pattern sum of the top class `≥ θ`.
    RawSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidenceRule {
    pub measure: ConfidenceMeasure,
    pub threshold: f64,
    pub max_rounds: usize,
}

impl Default for ConfidenceRule {
    fn default() -> Self {
        Self {
            measure: ConfidenceMeasure::ScoreRatio,
            threshold: 1.7,
            max_rounds: 3,
        }
    }
}

impl ConfidenceRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || !self.threshold.is_finite() {
            return Err(Error::Config {
                field: "confidence.threshold",
                reason: format!("must be positive, got {}", self.threshold),
            });
        }
        if self.max_rounds == 0 {
            return Err(Error::Config {
                field: "confidence.max_rounds",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    pub fn passes(&self, s: &ClassScores) -> bool {
        let gap = s.scores[s.pos] - s.scores[s.neg];
        match self.measure {
            ConfidenceMeasure::ScoreRatio => gap.exp() >= self.threshold,
            ConfidenceMeasure::ScoreMargin => gap >= self.threshold,
            ConfidenceMeasure::RawSum => s.sums[s.pos] >= self.threshold,
        }
    }
}

/// What happens to a class's support prototypes once target samples qualify.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromotionMode {
    #[default]
    Replace,
    /// Keep the support shots and add the target samples.
    Union,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Support { shot: usize },
    Target { query: usize, round: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub features: Matrix,
    pub provenance: Provenance,
}

impl AsRef<Matrix> for Prototype {
    fn as_ref(&self) -> &Matrix {
        &self.features
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub classes: Vec<Vec<Prototype>>,
}

impl PrototypeSet {
    pub fn from_support(support: &[Vec<Matrix>]) -> Self {
        Self {
            classes: support
                .iter()
                .map(|shots| {
                    shots
                        .iter()
                        .enumerate()
                        .map(|(shot, f)| Prototype {
                            features: f.clone(),
                            provenance: Provenance::Support { shot },
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    /// Classes currently holding at least one target-domain prototype.
    pub fn target_classes(&self) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, ps)| ps.iter().any(|p| matches!(p.provenance, Provenance::Target { .. })))
            .map(|(c, _)| c)
            .collect()
    }

    pub fn classify(&self, queries: &[&Matrix], opts: PatternOptions) -> Result<Vec<ClassScores>> {
        queries
            .iter()
            .map(|q| class_scores(q, &self.classes, opts).map(|(s, _)| s))
            .collect()
    }
}

/// Confident target query indices, grouped by predicted class.
pub fn select_confident(scores: &[ClassScores], rule: &ConfidenceRule) -> Vec<Vec<usize>> {
    let n = scores.first().map_or(0, |s| s.scores.len());
    let mut out = vec![Vec::new(); n];
    for (q, s) in scores.iter().enumerate() {
        if rule.passes(s) {
            out[s.pos].push(q);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct SelfTrainOutcome {
    pub prototypes: PrototypeSet,
    pub initial_predictions: Vec<usize>,
    pub predictions: Vec<usize>,
    pub final_scores: Vec<ClassScores>,
    pub rounds_used: usize,
    /// Every `(query, class, round)` promotion, in order.
    pub promotions: Vec<(usize, usize, usize)>,
    /// Confident queries per class in the last selection that was applied.
    pub confident: Vec<Vec<usize>>,
}

/// Classify → select confident → promote, for up to `rule.max_rounds` rounds
/// or until the confident set stops changing.
pub fn promote_and_reclassify(
    queries: &[&Matrix],
    support: PrototypeSet,
    rule: &ConfidenceRule,
    mode: PromotionMode,
    opts: PatternOptions,
) -> Result<SelfTrainOutcome> {
    rule.validate()?;
    let mut protos = support.clone();
    let mut scores = protos.classify(queries, opts)?;
    let initial_predictions: Vec<usize> = scores.iter().map(|s| s.pos).collect();
    let mut previous: Option<Vec<Vec<usize>>> = None;
    let mut promotions = Vec::new();
    let mut rounds_used = 0;

    for round in 1..=rule.max_rounds {
        let confident = select_confident(&scores, rule);
        if confident.iter().all(Vec::is_empty) || previous.as_ref() == Some(&confident) {
            break;
        }
        for (c, members) in confident.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let mut next: Vec<Prototype> = match mode {
                PromotionMode::Replace => Vec::new(),
                PromotionMode::Union => support.classes[c].clone(),
            };
            for &q in members {
                next.push(Prototype {
                    features: queries[q].clone(),
                    provenance: Provenance::Target { query: q, round },
                });
                promotions.push((q, c, round));
            }
            protos.classes[c] = next;
        }
        rounds_used = round;
        previous = Some(confident);
        scores = protos.classify(queries, opts)?;
    }

    Ok(SelfTrainOutcome {
        predictions: scores.iter().map(|s| s.pos).collect(),
        initial_predictions,
        final_scores: scores,
        rounds_used,
        promotions,
        confident: previous.unwrap_or_else(|| vec![Vec::new(); protos.n_way()]),
        prototypes: protos,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// `max(π_neg − π_pos + m, 0)` for one query.
pub fn matching_term(pi_pos: f64, pi_neg: f64, margin: f64) -> f64 {
    (pi_neg - pi_pos + margin).max(0.0)
}

/// Hinge on the softmax gap between each query's top two classes.
pub fn class_matching_loss(scores: &[ClassScores], margin: f64, reduction: Reduction) -> Result<f64> {
    if !(margin >= 0.0) {
        return Err(Error::invalid(format!("margin must be >= 0, got {margin}")));
    }
    let mut total = 0.0;
    for s in scores {
        if s.scores.len() < 2 {
            return Err(Error::invalid("class matching needs at least 2 classes"));
        }
        let pi = s.probabilities();
        total += matching_term(pi[s.pos], pi[s.neg], margin);
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean if scores.is_empty() => 0.0,
        Reduction::Mean => total / scores.len() as f64,
    })
}
