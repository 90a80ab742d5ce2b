use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Inducing inputs drawn from the training inputs, with the rows they came
/// from.
#[derive(Debug, Clone, PartialEq)]
pub struct Inducing {
    pub indices: Vec<usize>,
    /// `M × D`.
    pub z: DMatrix<f64>,
}

/// Uniform subset of `M` rows of `x` without replacement.
///
/// The rows are a prefix of one seeded permutation, so for a fixed seed the
/// sets are nested in `M`.
pub fn select_inducing(x: &DMatrix<f64>, m: usize, seed: u64) -> Result<Inducing> {
    let n = x.nrows();
    if m == 0 || m > n {
        return Err(Error::InvalidM { m, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(m);
    Ok(Inducing {
        z: x.select_rows(&order),
        indices: order,
    })
}

/// `round(fraction · n)` clamped to `[1, n]`.
pub fn inducing_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n.max(1))
}
