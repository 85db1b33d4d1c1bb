use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fsuda_core::numkit::{farthest_first_init, kmeans, singular_values, Matrix};
use fsuda_core::rng::PortableRng;
use fsuda_core::synthgen::generate_episode;
use fsuda_core::{Pipeline, PipelineConfig, SynthConfig};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = PortableRng::new(seed);
    Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols, 1.0)).unwrap()
}

fn numerics(c: &mut Criterion) {
    let points = gaussian(300, 64, 1);
    c.bench_function("kmeans_300x64_k8", |b| {
        b.iter(|| {
            let init = farthest_first_init(&points, 8, &mut PortableRng::new(7)).unwrap();
            black_box(kmeans(&points, 8, &init, 100, 1e-9).unwrap())
        })
    });
    let m = gaussian(200, 64, 2);
    c.bench_function("singular_values_200x64", |b| b.iter(|| black_box(singular_values(&m).unwrap())));
}

fn episodes(c: &mut Criterion) {
    let (episode, _) = generate_episode(&SynthConfig::default()).unwrap();
    let pipe = Pipeline::new(PipelineConfig::default()).unwrap();
    c.bench_function("run_episode_default", |b| {
        b.iter(|| black_box(pipe.run_episode(&episode, 0, None).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = numerics, episodes
}
criterion_main!(benches);
