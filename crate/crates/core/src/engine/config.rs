use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selftrain::{ConfidenceRule, PromotionMode, Reduction};
use crate::simpat::PatternOptions;
use crate::tse::TseSettings;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    #[default]
    Semantic,
    /// Score raw local features directly; no clustering.
    RawLocal,
}

/// Everything that shapes one pipeline run. Defaults are the full method:
/// semantic features, centroid cross-attention and self-training on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub label: Option<String>,
    pub lambda_sfa: f64,
    pub lambda_spa: f64,
    pub lambda_clm: f64,
    pub feature_mode: FeatureMode,
    pub self_training: bool,
    pub catt: bool,
    pub tse: TseSettings,
    pub patterns: PatternOptions,
    pub confidence: ConfidenceRule,
    pub promotion: PromotionMode,
    pub margin: f64,
    pub clm_reduction: Reduction,
    pub ridge: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            label: None,
            lambda_sfa: 0.1,
            lambda_spa: 0.05,
            lambda_clm: 0.01,
            feature_mode: FeatureMode::Semantic,
            self_training: true,
            catt: true,
            tse: TseSettings::default(),
            patterns: PatternOptions::default(),
            confidence: ConfidenceRule::default(),
            promotion: PromotionMode::Replace,
            margin: 1.5,
            clm_reduction: Reduction::Sum,
            ridge: 1e-4,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("lambda_sfa", self.lambda_sfa),
            ("lambda_spa", self.lambda_spa),
            ("lambda_clm", self.lambda_clm),
            ("margin", self.margin),
            ("ridge", self.ridge),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config {
                    field,
                    reason: format!("must be finite and >= 0, got {v}"),
                });
            }
        }
        self.tse.validate()?;
        self.confidence.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn toggles(&self) -> Toggles {
        Toggles {
            tse: self.feature_mode == FeatureMode::Semantic,
            catt: self.catt && self.feature_mode == FeatureMode::Semantic,
            cs: self.self_training,
        }
    }

    pub fn with_toggles(&self, t: Toggles) -> Self {
        Self {
            label: None,
            feature_mode: if t.tse {
                FeatureMode::Semantic
            } else {
                FeatureMode::RawLocal
            },
            catt: t.catt,
            self_training: t.cs,
            ..self.clone()
        }
    }

    /// Explicit label, else the toggle set.
    pub fn variant_label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.toggles().to_string())
    }
}

/// Module switches of the ablation grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Toggles {
    pub tse: bool,
    pub catt: bool,
    pub cs: bool,
}

impl Toggles {
    pub const NONE: Toggles = Toggles {
        tse: false,
        catt: false,
        cs: false,
    };
    pub const FULL: Toggles = Toggles {
        tse: true,
        catt: true,
        cs: true,
    };

    /// Rows of the module ablation: TSE, CS, TSE+catt, TSE+CS, TSE+catt+CS.
    pub fn module_grid() -> Vec<Toggles> {
        let t = |tse, catt, cs| Toggles { tse, catt, cs };
        vec![
            t(true, false, false),
            t(false, false, true),
            t(true, true, false),
            t(true, false, true),
            t(true, true, true),
        ]
    }
}

impl fmt::Display for Toggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.tse {
            parts.push("TSE");
        }
        if self.catt {
            parts.push("catt");
        }
        if self.cs {
            parts.push("CS");
        }
        if parts.is_empty() {
            write!(f, "raw_local")
        } else {
            write!(f, "{}", parts.join("+"))
        }
    }
}

impl std::str::FromStr for Toggles {
    type Err = Error;

    /// `"tse+catt+cs"`, `"cs"`, `"raw_local"`, … (case-insensitive, `+` or `,`).
    fn from_str(s: &str) -> Result<Self> {
        let mut t = Toggles::NONE;
        let s = s.trim().to_ascii_lowercase();
        if s == "raw_local" || s == "raw" || s.is_empty() {
            return Ok(t);
        }
        for part in s.split(['+', ',']).map(str::trim) {
            match part {
                "tse" => t.tse = true,
                "catt" => t.catt = true,
                "cs" => t.cs = true,
                other => return Err(Error::invalid(format!("unknown module toggle `{other}`"))),
            }
        }
        if t.catt && !t.tse {
            return Err(Error::invalid("catt requires tse"));
        }
        Ok(t)
    }
}
