//! Shared fixtures for the benchmarks.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sfr::nn::mlp_init;
use sfr::{Dataset, Likelihood, MlpArchitecture, MlpWeights};

pub fn normal_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Random SPD matrix `AAᵀ/n + I`.
pub fn spd(n: usize, seed: u64) -> DMatrix<f64> {
    let a = normal_matrix(n, n, seed);
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n)
}

/// Randomly initialized tanh MLP with two hidden layers.
pub fn network(input_dim: usize, width: usize, output_dim: usize, seed: u64) -> MlpWeights {
    mlp_init(&MlpArchitecture::new(input_dim, vec![width, width], output_dim), seed)
}

/// Binary labels from the sign of the first feature.
pub fn binary_dataset(n: usize, d: usize, seed: u64) -> (Dataset, Likelihood) {
    let x = normal_matrix(n, d, seed);
    let y = (0..n).map(|i| usize::from(x[(i, 0)] > 0.0)).collect();
    (Dataset::classification("bench", x, y, 2), Likelihood::BernoulliLogit)
}
