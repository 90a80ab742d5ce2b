//! Neural tangent kernel of a trained network and block Gram assembly.
//!
//! Gram matrices use point-major, channel-minor layout: row `i·C + c` is
//! output channel `c` at input `i`.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::symmetrize_in_place;
use crate::nn::{mlp_jacobian, MlpWeights};

/// `κ(x, x') = (1/δ) J(x) J(x')ᵀ` at frozen weights.
#[derive(Debug, Clone)]
pub struct NtkKernel {
    weights: Arc<MlpWeights>,
    prior_precision: f64,
}

impl NtkKernel {
    pub fn new(weights: MlpWeights, prior_precision: f64) -> Result<Self> {
        Self::from_shared(Arc::new(weights), prior_precision)
    }

    pub fn from_shared(weights: Arc<MlpWeights>, prior_precision: f64) -> Result<Self> {
        if !(prior_precision > 0.0) || !prior_precision.is_finite() {
            return Err(Error::Config(format!("prior precision must be positive, got {prior_precision}")));
        }
        Ok(NtkKernel {
            weights,
            prior_precision,
        })
    }

    /// Same network, different prior precision.
    pub fn with_prior_precision(&self, prior_precision: f64) -> Result<Self> {
        Self::from_shared(Arc::clone(&self.weights), prior_precision)
    }

    pub fn weights(&self) -> &MlpWeights {
        &self.weights
    }

    pub fn shared_weights(&self) -> Arc<MlpWeights> {
        Arc::clone(&self.weights)
    }

    pub fn prior_precision(&self) -> f64 {
        self.prior_precision
    }

    pub fn block_dim(&self) -> usize {
        self.weights.output_dim()
    }

    /// One `C × C` kernel block.
    pub fn ntk_block(&self, x: &[f64], x_prime: &[f64]) -> Result<DMatrix<f64>> {
        let j1 = mlp_jacobian(&self.weights, x)?;
        let j2 = mlp_jacobian(&self.weights, x_prime)?;
        Ok(j1 * j2.transpose() / self.prior_precision)
    }

    /// Block Gram `K(X1, X2)`, reusing cached Jacobians when the input sets
    /// carry identifiers.
    pub fn gram(&self, x1: InputSet<'_>, x2: InputSet<'_>, cache: Option<&JacobianCache>) -> Result<BlockGram> {
        let j1 = jacobians_for(&self.weights, x1, cache)?;
        let same = x1.id.is_some() && x1.id == x2.id;
        let j2 = if same { Arc::clone(&j1) } else { jacobians_for(&self.weights, x2, cache)? };
        let mut matrix = gram_from_stacks(&j1, &j2, self.prior_precision);
        if same {
            symmetrize_in_place(&mut matrix);
        }
        Ok(BlockGram {
            rows: x1.x.nrows(),
            cols: x2.x.nrows(),
            block_dim: self.block_dim(),
            matrix,
        })
    }
}

/// `(1/δ) J1ᵀ J2` for stacked transposed Jacobians (`P × N·C`).
pub fn gram_from_stacks(j1: &DMatrix<f64>, j2: &DMatrix<f64>, prior_precision: f64) -> DMatrix<f64> {
    let mut k = j1.transpose() * j2;
    k /= prior_precision;
    k
}

/// A set of inputs, optionally named so its Jacobians can be cached.
#[derive(Debug, Clone, Copy)]
pub struct InputSet<'a> {
    pub id: Option<&'a str>,
    pub x: &'a DMatrix<f64>,
}

impl<'a> InputSet<'a> {
    pub fn named(id: &'a str, x: &'a DMatrix<f64>) -> Self {
        InputSet { id: Some(id), x }
    }

    pub fn anonymous(x: &'a DMatrix<f64>) -> Self {
        InputSet { id: None, x }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGram {
    pub rows: usize,
    pub cols: usize,
    pub block_dim: usize,
    pub matrix: DMatrix<f64>,
}

impl BlockGram {
    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let c = self.block_dim;
        self.matrix.view((i * c, j * c), (c, c)).into_owned()
    }
}

fn fingerprint(w: &MlpWeights) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    w.arch.hash(&mut h);
    for v in &w.w {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Write-once map from input-set identifier to its stacked Jacobians at one
/// set of weights.
#[derive(Debug)]
pub struct JacobianCache {
    weights_id: u64,
    entries: RwLock<HashMap<String, Arc<DMatrix<f64>>>>,
    computed: AtomicUsize,
    hits: AtomicUsize,
}

impl JacobianCache {
    pub fn new(weights: &MlpWeights) -> Self {
        JacobianCache {
            weights_id: fingerprint(weights),
            entries: RwLock::new(HashMap::new()),
            computed: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        }
    }

    /// Number of network Jacobian passes performed (one per input set).
    pub fn computed(&self) -> usize {
        self.computed.load(Ordering::Relaxed)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.read().expect("cache lock").contains_key(id)
    }

    pub fn get_or_compute(&self, weights: &MlpWeights, id: &str, x: &DMatrix<f64>) -> Result<Arc<DMatrix<f64>>> {
        if fingerprint(weights) != self.weights_id {
            return Err(Error::Config("Jacobian cache used with different weights".into()));
        }
        if let Some(j) = self.entries.read().expect("cache lock").get(id) {
            if j.ncols() == x.nrows() * weights.output_dim() {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(Arc::clone(j));
            }
            return Err(Error::DimensionMismatch {
                context: "cached Jacobian input set size",
                expected: j.ncols() / weights.output_dim(),
                found: x.nrows(),
            });
        }
        let j = Arc::new(weights.jacobian_stack(x)?);
        self.computed.fetch_add(1, Ordering::Relaxed);
        let mut entries = self.entries.write().expect("cache lock");
        Ok(Arc::clone(entries.entry(id.to_string()).or_insert(j)))
    }
}

/// Stacked Jacobians for an input set, through the cache when possible.
pub fn jacobians_for(weights: &MlpWeights, set: InputSet<'_>, cache: Option<&JacobianCache>) -> Result<Arc<DMatrix<f64>>> {
    match (set.id, cache) {
        (Some(id), Some(cache)) => cache.get_or_compute(weights, id, set.x),
        _ => Ok(Arc::new(weights.jacobian_stack(set.x)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{mlp_init, MlpArchitecture};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn random_inputs(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |i, j| ((i * 7 + j * 3) as f64 + seed as f64 * 0.917).sin() * 1.7)
    }

    #[test]
    fn linear_kernel_is_inner_product() {
        let w = MlpWeights::new(MlpArchitecture::new(3, vec![], 1).without_bias(), vec![0.3, -0.2, 1.1]).unwrap();
        let k = NtkKernel::new(w, 1.0).unwrap();
        let (x, y) = ([1.0, 2.0, -1.0], [0.5, 0.0, 4.0]);
        assert_relative_eq!(k.ntk_block(&x, &y).unwrap()[(0, 0)], 0.5 - 4.0, epsilon = 1e-15);

        let eye = DMatrix::identity(2, 2);
        let k2 = NtkKernel::new(
            MlpWeights::new(MlpArchitecture::new(2, vec![], 1).without_bias(), vec![0.7, 0.1]).unwrap(),
            1.0,
        )
        .unwrap();
        let g = k2.gram(InputSet::anonymous(&eye), InputSet::anonymous(&eye), None).unwrap();
        assert_eq!(g.matrix, DMatrix::<f64>::identity(2, 2));
    }

    #[test]
    fn doubling_precision_halves_kernel() {
        let w = mlp_init(&MlpArchitecture::new(2, vec![5], 2), 3);
        let k = NtkKernel::new(w, 0.7).unwrap();
        let k2 = k.with_prior_precision(1.4).unwrap();
        let (x, y) = ([0.3, -0.8], [1.2, 0.4]);
        assert_relative_eq!(k2.ntk_block(&x, &y).unwrap(), 0.5 * k.ntk_block(&x, &y).unwrap(), epsilon = 1e-14);
        assert_relative_eq!(k.ntk_block(&x, &y).unwrap(), k.ntk_block(&y, &x).unwrap().transpose(), epsilon = 1e-14);
    }

    #[test]
    fn gram_blocks_and_transpose() {
        let w = mlp_init(&MlpArchitecture::new(2, vec![4], 3), 5);
        let k = NtkKernel::new(w, 2.0).unwrap();
        let a = random_inputs(3, 2, 1);
        let b = random_inputs(2, 2, 2);
        let g = k.gram(InputSet::anonymous(&a), InputSet::anonymous(&b), None).unwrap();
        let gt = k.gram(InputSet::anonymous(&b), InputSet::anonymous(&a), None).unwrap();
        assert_eq!(g.matrix.shape(), (9, 6));
        assert_relative_eq!(g.matrix, gt.matrix.transpose(), epsilon = 1e-14);
        let row = |m: &DMatrix<f64>, i: usize| m.row(i).iter().copied().collect::<Vec<_>>();
        assert_relative_eq!(g.block(2, 1), k.ntk_block(&row(&a, 2), &row(&b, 1)).unwrap(), epsilon = 1e-13);
    }

    #[test]
    fn cache_is_transparent_and_counts() {
        let w = mlp_init(&MlpArchitecture::new(3, vec![6], 2), 8);
        let k = NtkKernel::new(w.clone(), 1.3).unwrap();
        let x = random_inputs(5, 3, 4);
        let z = random_inputs(2, 3, 9);
        let cache = JacobianCache::new(&w);
        let cached = k.gram(InputSet::named("x", &x), InputSet::named("z", &z), Some(&cache)).unwrap();
        let again = k.gram(InputSet::named("x", &x), InputSet::named("z", &z), Some(&cache)).unwrap();
        let fresh = k.gram(InputSet::anonymous(&x), InputSet::anonymous(&z), None).unwrap();
        assert_eq!(cached, fresh);
        assert_eq!(again, fresh);
        assert_eq!(cache.computed(), 2);
        assert_eq!(cache.hits(), 2);
        let stack = cache.get_or_compute(&w, "x", &x).unwrap();
        assert_eq!(*stack, w.jacobian_stack(&x).unwrap());

        let other = mlp_init(&MlpArchitecture::new(3, vec![6], 2), 9);
        assert!(cache.get_or_compute(&other, "x", &x).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn gram_is_psd(n in 1usize..8, c in 1usize..4, seed in 0u64..500) {
            let w = mlp_init(&MlpArchitecture::new(3, vec![5, 4], c), seed);
            let k = NtkKernel::new(w, 0.5).unwrap();
            let x = random_inputs(n, 3, seed);
            let g = k.gram(InputSet::named("x", &x), InputSet::named("x", &x), Some(&JacobianCache::new(k.weights()))).unwrap();
            prop_assert_eq!(&g.matrix, &g.matrix.transpose());
            let scale = g.matrix.trace() / (n * c) as f64;
            let min = g.matrix.clone().symmetric_eigenvalues().min();
            prop_assert!(min >= -1e-8 * scale, "min eigenvalue {min}, scale {scale}");
            let single = k.ntk_block(&[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3]).unwrap();
            prop_assert!(single.symmetric_eigenvalues().min() >= -1e-10);
        }

        #[test]
        fn gram_scales_inversely_with_precision(c in 1usize..3, factor in 0.1..10.0f64, seed in 0u64..100) {
            let w = mlp_init(&MlpArchitecture::new(2, vec![4], c), seed);
            let x = random_inputs(4, 2, seed);
            let k = NtkKernel::new(w, 0.8).unwrap();
            let scaled = k.with_prior_precision(0.8 * factor).unwrap();
            let g = k.gram(InputSet::anonymous(&x), InputSet::anonymous(&x), None).unwrap();
            let gs = scaled.gram(InputSet::anonymous(&x), InputSet::anonymous(&x), None).unwrap();
            prop_assert!((&gs.matrix - &g.matrix / factor).amax() <= 1e-12 * g.matrix.amax());
        }
    }
}
