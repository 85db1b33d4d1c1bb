mod common;

use common::{raw_baseline, small_synth};
use fsuda_core::engine::{evaluate, SynthSource};
use fsuda_core::SynthConfig;

fn raw_accuracy(cfg: SynthConfig, tasks: usize) -> f64 {
    evaluate(&SynthSource::new(cfg).unwrap(), tasks, &raw_baseline()).unwrap().mean_accuracy
}

#[test]
fn strong_shift_lowers_raw_accuracy() {
    let base = SynthConfig {
        pixel_noise: 0.2,
        ..small_synth(100, 0.0)
    };
    let clean = raw_accuracy(base.clone(), 50);
    let shifted = raw_accuracy(
        SynthConfig {
            shift_strength: 0.8,
            ..base
        },
        50,
    );
    assert!(shifted < clean, "γ=0.8: {shifted}, γ=0: {clean}");
}

#[test]
fn raw_accuracy_is_non_increasing_in_shift() {
    let accs: Vec<f64> = [0.0, 0.3, 0.6, 0.9]
        .iter()
        .map(|&g| raw_accuracy(small_synth(200, g), 50))
        .collect();
    for w in accs.windows(2) {
        assert!(w[1] <= w[0] + 0.01, "{accs:?}");
    }
}
