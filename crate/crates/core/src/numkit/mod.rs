//! Dense numeric primitives: matrices, singular values, Cholesky, moments,
//! cosines, softmax, k-means and linear assignment.

mod assignment;
mod kmeans;
mod linalg;
mod matrix;
mod svd;

pub use assignment::{max_weight_assignment, min_cost_assignment};
pub use kmeans::{farthest_first_init, kmeans, KMeansResult};
pub use linalg::{cholesky_logdet, cosine_matrix, gaussian_moments, log_sum_exp, softmax, Cholesky};
pub use matrix::{dot, norm, squared_distance, Matrix};
pub use svd::singular_values;
