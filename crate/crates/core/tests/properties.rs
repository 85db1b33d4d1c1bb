//! Randomised invariants across the numeric and pipeline modules.

use fsuda_core::align::{fit_diagonal, fit_full, kl_gaussian, sfa_loss, GaussianStats};
use fsuda_core::numkit::{cosine_matrix, farthest_first_init, gaussian_moments, kmeans, singular_values, softmax, squared_distance, Matrix};
use fsuda_core::rng::PortableRng;
use fsuda_core::selftrain::{class_matching_loss, matching_term, Reduction};
use fsuda_core::simpat::{class_scores, classification_loss, ClassScores, PatternOptions};
use fsuda_core::synthgen::generate_episode;
use fsuda_core::tse::{select_cluster_count, semantic_map};
use fsuda_core::SynthConfig;
use proptest::prelude::*;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = PortableRng::new(seed);
    Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols, 1.0)).unwrap()
}

fn rotation(d: usize, seed: u64) -> Matrix {
    // Gram-Schmidt on a Gaussian matrix.
    let g = gaussian(d, d, seed);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for r in g.row_iter() {
        let mut v = r.to_vec();
        for u in &rows {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        rows.push(v);
    }
    Matrix::from_rows(&rows).unwrap()
}

fn scaled_rows(m: &Matrix, seed: u64) -> Matrix {
    let mut rng = PortableRng::new(seed);
    let rows: Vec<Vec<f64>> = m
        .row_iter()
        .map(|r| {
            let a = rng.uniform_in(0.01, 100.0);
            r.iter().map(|x| a * x).collect()
        })
        .collect();
    Matrix::from_rows(&rows).unwrap()
}

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(64)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn singular_values_match_frobenius(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
        let m = gaussian(rows, cols, seed);
        let s = singular_values(&m).unwrap();
        prop_assert_eq!(s.len(), rows.min(cols));
        prop_assert!(s.windows(2).all(|w| w[0] >= w[1]) && s.iter().all(|&x| x >= 0.0));
        let fro2 = m.frobenius_norm().powi(2);
        let sum2: f64 = s.iter().map(|x| x * x).sum();
        prop_assert!((fro2 - sum2).abs() <= 1e-9 * fro2.max(1.0));
    }

    #[test]
    fn cosines_are_bounded(rows in 1usize..8, cols in 1usize..8, d in 1usize..6, seed in any::<u64>(), big in 1e-6f64..1e6) {
        let mut a = gaussian(rows, d, seed);
        a.scale(big);
        let b = gaussian(cols, d, seed ^ 1);
        let c = cosine_matrix(&a, &b).unwrap();
        prop_assert!(c.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn covariance_is_exactly_symmetric(n in 2usize..20, d in 1usize..6, seed in any::<u64>()) {
        let (_, s) = gaussian_moments(&gaussian(n, d, seed), 1e-4).unwrap();
        for i in 0..d {
            for j in 0..d {
                prop_assert_eq!(s.row(i)[j].to_bits(), s.row(j)[i].to_bits());
            }
        }
    }

    #[test]
    fn kmeans_result_is_consistent(n in 2usize..30, d in 1usize..5, k in 1usize..6, seed in any::<u64>()) {
        let k = k.min(n);
        let pts = gaussian(n, d, seed);
        let init = farthest_first_init(&pts, k, &mut PortableRng::new(seed)).unwrap();
        let r = kmeans(&pts, k, &init, 200, 0.0).unwrap();
        prop_assert_eq!(r.centroids.rows(), k);
        prop_assert!(r.inertia >= 0.0);
        prop_assert!(r.assignments.iter().all(|&a| a < k));
        for c in 0..k {
            prop_assert!(r.assignments.contains(&c), "cluster {} empty", c);
        }
        for w in r.inertia_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
        let recomputed: f64 = (0..n).map(|i| squared_distance(pts.row(i), r.centroids.row(r.assignments[i]))).sum();
        prop_assert!((recomputed - r.inertia).abs() <= 1e-9 * recomputed.max(1.0));
    }

    #[test]
    fn softmax_is_shift_invariant(v in prop::collection::vec(-30.0f64..30.0, 1..8), shift in -100.0f64..100.0) {
        let a = softmax(&v);
        let b = softmax(&v.iter().map(|x| x + shift).collect::<Vec<_>>());
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cluster_count_ignores_permutation_and_rotation(n in 4usize..20, d in 2usize..8, seed in any::<u64>()) {
        let l = gaussian(n, d, seed);
        let k_max = (d / 2).max(2);
        let k = select_cluster_count(&l, 0.1, 2, k_max).unwrap();
        let mut idx: Vec<usize> = (0..n).collect();
        PortableRng::new(seed ^ 7).shuffle(&mut idx);
        prop_assert_eq!(select_cluster_count(&l.select_rows(&idx), 0.1, 2, k_max).unwrap(), k);
        let rotated = l.matmul(&rotation(d, seed ^ 9)).unwrap();
        prop_assert_eq!(select_cluster_count(&rotated, 0.1, 2, k_max).unwrap(), k);
    }

    #[test]
    fn semantic_map_ignores_positive_rescaling(h in 1usize..4, w in 1usize..4, k in 2usize..5, d in 2usize..6, seed in any::<u64>()) {
        let l = gaussian(h * w, d, seed);
        let c = gaussian(k, d, seed ^ 3);
        let a = semantic_map(&l, h, w, &c).unwrap();
        let b = semantic_map(&scaled_rows(&l, seed ^ 4), h, w, &scaled_rows(&c, seed ^ 5)).unwrap();
        prop_assert!(a.values.max_abs_diff(&b.values) <= 1e-9);
    }

    #[test]
    fn score_ranking_survives_rescaling(n in 2usize..5, shots in 1usize..3, s in 1usize..6, d in 2usize..6, seed in any::<u64>()) {
        let query = gaussian(s, d, seed);
        let support: Vec<Vec<Matrix>> = (0..n)
            .map(|c| (0..shots).map(|j| gaussian(s, d, seed ^ ((c * 10 + j + 1) as u64))).collect())
            .collect();
        let scaled: Vec<Vec<Matrix>> = support.iter().enumerate()
            .map(|(c, v)| v.iter().enumerate().map(|(j, m)| scaled_rows(m, seed ^ ((c * 10 + j + 100) as u64))).collect())
            .collect();
        let (a, _) = class_scores(&query, &support, PatternOptions::default()).unwrap();
        let (b, _) = class_scores(&scaled_rows(&query, seed ^ 99), &scaled, PatternOptions::default()).unwrap();
        prop_assert_eq!((a.pos, a.neg), (b.pos, b.neg));
    }

    #[test]
    fn identical_sets_are_classified_perfectly(n in 2usize..6, s in 1usize..5, d in 2usize..8, seed in any::<u64>()) {
        let imgs: Vec<Matrix> = (0..n).map(|c| gaussian(s, d, seed ^ (c as u64 + 1))).collect();
        let support: Vec<Vec<Matrix>> = imgs.iter().map(|m| vec![m.clone()]).collect();
        let scores: Vec<ClassScores> = imgs.iter().map(|q| class_scores(q, &support, PatternOptions::default()).unwrap().0).collect();
        let labels: Vec<usize> = (0..n).collect();
        prop_assert!(scores.iter().zip(&labels).all(|(s, &l)| s.pos == l));
        prop_assert!(classification_loss(&scores, &labels).unwrap() <= (n as f64).ln() + 1e-12);
    }

    #[test]
    fn matching_term_bounds_and_monotonicity(p in 0.0f64..1.0, q in 0.0f64..1.0, neg in 0.0f64..1.0, m in 0.0f64..3.0) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(matching_term(hi, neg, m) <= matching_term(lo, neg, m));
        // For a ranked pair the term stays within [max(0, m - 1), m].
        let (pos, neg) = if p >= q { (p, q) } else { (q, p) };
        let t = matching_term(pos, neg, m);
        prop_assert!(t >= (m - 1.0).max(0.0) - 1e-12 && t <= m + 1e-12);
    }

    #[test]
    fn class_matching_sum_is_n_times_mean(raw in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 5), 1..6)) {
        let scores: Vec<ClassScores> = raw.into_iter().map(|s| ClassScores::from_scores(s.clone(), s)).collect();
        let sum = class_matching_loss(&scores, 1.5, Reduction::Sum).unwrap();
        let mean = class_matching_loss(&scores, 1.5, Reduction::Mean).unwrap();
        prop_assert!((sum - mean * scores.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn kl_is_zero_on_self_and_never_negative(n in 4usize..30, d in 1usize..5, seed in any::<u64>()) {
        let a = fit_full(&gaussian(n, d, seed), 1e-4).unwrap();
        let b = fit_full(&gaussian(n, d, seed ^ 11), 1e-4).unwrap();
        prop_assert!(kl_gaussian(&a, &a).unwrap().abs() <= 1e-10);
        prop_assert!(kl_gaussian(&a, &b).unwrap() >= -1e-10);
        prop_assert!(kl_gaussian(&b, &a).unwrap() >= -1e-10);
    }

    #[test]
    fn diagonal_kl_is_sum_of_coordinates(n in 4usize..30, d in 1usize..6, seed in any::<u64>()) {
        let (x, y) = (gaussian(n, d, seed), gaussian(n, d, seed ^ 13));
        let whole = kl_gaussian(&fit_diagonal(&x, 1e-4).unwrap(), &fit_diagonal(&y, 1e-4).unwrap()).unwrap();
        let per: f64 = (0..d)
            .map(|j| {
                let col = |m: &Matrix| Matrix::from_vec(n, 1, m.row_iter().map(|r| r[j]).collect()).unwrap();
                let (a, b): (GaussianStats, GaussianStats) = (fit_diagonal(&col(&x), 1e-4).unwrap(), fit_diagonal(&col(&y), 1e-4).unwrap());
                kl_gaussian(&a, &b).unwrap()
            })
            .sum();
        prop_assert!((whole - per).abs() <= 1e-9 * per.abs().max(1.0));
    }

    #[test]
    fn sfa_ignores_sample_order(n in 2usize..6, seed in any::<u64>()) {
        let src: Vec<Matrix> = (0..n).map(|i| gaussian(4, 3, seed ^ (i as u64 + 1))).collect();
        let tgt: Vec<Matrix> = (0..n).map(|i| gaussian(4, 3, seed ^ (i as u64 + 50))).collect();
        let base = sfa_loss(&src, &tgt, 1e-4).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        PortableRng::new(seed).shuffle(&mut order);
        let src2: Vec<Matrix> = order.iter().map(|&i| src[i].clone()).collect();
        order.reverse();
        let tgt2: Vec<Matrix> = order.iter().map(|&i| tgt[i].clone()).collect();
        let moved = sfa_loss(&src2, &tgt2, 1e-4).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9 * base.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generator_is_deterministic(seed in any::<u64>(), gamma in 0.0f64..1.0, rho in 0.0f64..0.5) {
        let cfg = SynthConfig { seed, shift_strength: gamma, distractor_rate: rho, n_query: 5, h: 4, w: 4, d: 8, parts_per_class: 3, ..SynthConfig::default() };
        let (a, _) = generate_episode(&cfg).unwrap();
        let (b, _) = generate_episode(&cfg).unwrap();
        prop_assert_eq!(a.content_hash(), b.content_hash());
    }
}
