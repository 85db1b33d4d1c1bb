#![allow(dead_code)]

use fsuda_core::engine::{PipelineConfig, Toggles};
use fsuda_core::SynthConfig;

/// A small suite that runs in well under a second per episode.
pub fn small_synth(seed: u64, gamma: f64) -> SynthConfig {
    SynthConfig {
        seed,
        n_way: 5,
        k_shot: 1,
        n_query: 10,
        h: 6,
        w: 6,
        d: 32,
        shift_strength: gamma,
        ..SynthConfig::default()
    }
}

pub fn variant(t: Toggles) -> PipelineConfig {
    PipelineConfig::default().with_toggles(t)
}

pub fn raw_baseline() -> PipelineConfig {
    variant(Toggles::NONE)
}
