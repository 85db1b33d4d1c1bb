//! Hungarian algorithm (shortest augmenting path with potentials), O(n³).

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Minimum-cost perfect matching on a square cost matrix.
/// Returns `col_of_row`, the column matched to each row.
pub fn min_cost_assignment(cost: &Matrix) -> Result<Vec<usize>> {
    let (n, m) = cost.shape();
    if n != m {
        return Err(Error::shape(format!("assignment needs a square matrix, got {n}x{m}")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based internal arrays; index 0 is the virtual root.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        col_of_row[row_of_col[j] - 1] = j - 1;
    }
    Ok(col_of_row)
}

/// Maximum-weight perfect matching on a square weight matrix.
pub fn max_weight_assignment(weights: &Matrix) -> Result<Vec<usize>> {
    let mut cost = weights.clone();
    cost.scale(-1.0);
    min_cost_assignment(&cost)
}
