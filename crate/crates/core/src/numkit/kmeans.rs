//! Lloyd's k-means with seeded farthest-first initialisation.
//!
//! Distances are squared Euclidean. Assignment ties go to the lowest centroid
//! index. A cluster that ends an assignment step empty is reseeded with the
//! point farthest from its current centroid, so `k` never shrinks.

use super::matrix::{squared_distance, Matrix};
use crate::error::{Error, Result};
use crate::rng::PortableRng;

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step, in order.
    pub inertia_trace: Vec<f64>,
}

/// Farthest-first traversal: a uniformly drawn first centre, then repeatedly
/// the point farthest from its nearest chosen centre (lowest index on ties).
pub fn farthest_first_init(points: &Matrix, k: usize, rng: &mut PortableRng) -> Result<Matrix> {
    check_k(points, k)?;
    let n = points.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.below(n));
    let mut nearest: Vec<f64> = points
        .row_iter()
        .map(|p| squared_distance(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        chosen.push(best);
        let c = points.row(best);
        for (i, p) in points.row_iter().enumerate() {
            nearest[i] = nearest[i].min(squared_distance(p, c));
        }
    }
    Ok(points.select_rows(&chosen))
}

fn check_k(points: &Matrix, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if k > points.rows() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the number of points ({})",
            points.rows()
        )));
    }
    Ok(())
}

fn assign(points: &Matrix, centroids: &Matrix, assignments: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, p) in points.row_iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in centroids.row_iter().enumerate() {
            let d = squared_distance(p, c);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        assignments[i] = best;
        dists[i] = best_d;
        inertia += best_d;
    }
    inertia
}

/// Moves each empty cluster onto the point farthest from its own centroid.
/// Returns whether anything was reseeded.
fn reseed_empty(points: &Matrix, centroids: &mut Matrix, assignments: &mut [usize], dists: &mut [f64]) -> bool {
    let k = centroids.rows();
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    let mut reseeded = false;
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        // Farthest point among those whose cluster can spare it.
        let mut best: Option<usize> = None;
        for i in 0..points.rows() {
            if counts[assignments[i]] < 2 {
                continue;
            }
            if best.map_or(true, |b| dists[i] > dists[b]) {
                best = Some(i);
            }
        }
        let Some(i) = best else { break };
        counts[assignments[i]] -= 1;
        counts[j] = 1;
        assignments[i] = j;
        dists[i] = 0.0;
        centroids.row_mut(j).copy_from_slice(points.row(i));
        reseeded = true;
    }
    reseeded
}

fn update(points: &Matrix, assignments: &[usize], centroids: &mut Matrix) -> f64 {
    let (k, d) = centroids.shape();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (p, &a) in points.row_iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut max_shift = 0.0f64;
    for j in 0..k {
        if counts[j] == 0 {
            continue;
        }
        let inv = 1.0 / counts[j] as f64;
        let row = sums.row_mut(j);
        row.iter_mut().for_each(|v| *v *= inv);
        max_shift = max_shift.max(squared_distance(row, centroids.row(j)).sqrt());
        centroids.row_mut(j).copy_from_slice(row);
    }
    max_shift
}

/// Lloyd iterations from `init` until the largest centroid move is below `tol`
/// or `max_iter` updates have run.
pub fn kmeans(points: &Matrix, k: usize, init: &Matrix, max_iter: usize, tol: f64) -> Result<KMeansResult> {
    check_k(points, k)?;
    if init.rows() != k || init.cols() != points.cols() {
        return Err(Error::shape(format!(
            "init is {}x{}, expected {k}x{}",
            init.rows(),
            init.cols(),
            points.cols()
        )));
    }
    let n = points.rows();
    let mut centroids = init.clone();
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut trace = Vec::new();

    let mut inertia = assign(points, &centroids, &mut assignments, &mut dists);
    if reseed_empty(points, &mut centroids, &mut assignments, &mut dists) {
        inertia = dists.iter().sum();
    }
    trace.push(inertia);
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let shift = update(points, &assignments, &mut centroids);
        let mut next = assign(points, &centroids, &mut assignments, &mut dists);
        if reseed_empty(points, &mut centroids, &mut assignments, &mut dists) {
            next = dists.iter().sum();
        }
        debug_assert!(
            next <= inertia * (1.0 + 1e-9) + 1e-9,
            "k-means inertia increased: {inertia} -> {next}"
        );
        inertia = next;
        trace.push(inertia);
        if shift < tol {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        inertia,
        iterations,
        inertia_trace: trace,
    })
}
