//! Few-shot unsupervised domain adaptation over precomputed local features.
//!
//! Episodes carry labelled source support and queries plus unlabelled target
//! queries. The pipeline clusters local features into task-specific semantic
//! centroids, compares images through similarity patterns, promotes confident
//! target queries to prototypes, and reports alignment losses.

pub mod align;
pub mod engine;
pub mod error;
pub mod feature_store;
pub mod numkit;
pub mod rng;
pub mod selftrain;
pub mod simpat;
pub mod synthgen;
pub mod tse;

pub use engine::{ablate, evaluate, EpisodeReport, EpisodeSource, Pipeline, PipelineConfig, RunReport, Toggles};
pub use error::{Error, Result};
pub use feature_store::{Domain, Episode, EpisodeManifest, LocalFeatureMap};
pub use numkit::Matrix;
pub use synthgen::SynthConfig;
