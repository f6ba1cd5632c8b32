//! Fixtures shared by the criterion benches.

use adaptsv_core::metrics::ScoreSet;
use adaptsv_core::rng;
use adaptsv_core::Tensor;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "bench", &[rows as u64, cols as u64]);
    Tensor::matrix(rows, cols, rng::gaussian_vec(&mut r, rows * cols, 1.0)).expect("valid shape")
}

/// Gaussian scores with target mean shifted by one.
pub fn score_set(targets: usize, nontargets: usize, seed: u64) -> ScoreSet {
    let mut r = rng::stream(seed, "bench-scores", &[]);
    let t: Vec<f64> = rng::gaussian_vec(&mut r, targets, 1.0).iter().map(|v| v + 1.0).collect();
    let n = rng::gaussian_vec(&mut r, nontargets, 1.0);
    ScoreSet::from_parts(&t, &n).expect("both classes present")
}
