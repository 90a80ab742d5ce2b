//! Weight-space Laplace posterior with the generalized Gauss-Newton
//! precision `δI + Σᵢ Jᵢᵀ β̂ᵢ Jᵢ`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{duals_from_outputs, scale_blocks, sqrt_blocks, PredictiveDistribution, STREAM_CHUNK};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::likelihood::{Likelihood, OutputDistribution, PushForward};
use crate::linalg::{cholesky_psd, symmetric_eigen, CholeskyFactor, SymmetricMatrix, EIGEN_FLOOR};
use crate::nn::{mlp_forward, MlpWeights};

#[derive(Debug, Clone)]
pub struct GgnPosterior {
    pub w_star: MlpWeights,
    precision: SymmetricMatrix,
    chol_precision: CholeskyFactor,
    prior_precision: f64,
}

/// `U = J_X · blockdiag(β̂^{1/2})` accumulated chunk by chunk in dataset
/// order, handing each `P × chunk·C` block to `sink`.
fn sqrt_weighted_jacobians(w: &MlpWeights, data: &Dataset, lik: &Likelihood, mut sink: impl FnMut(DMatrix<f64>)) -> Result<()> {
    let c = lik.latent_dim();
    if c != w.output_dim() {
        return Err(Error::DimensionMismatch {
            context: "GGN likelihood vs network outputs",
            expected: w.output_dim(),
            found: c,
        });
    }
    let mut start = 0;
    while start < data.len() {
        let end = (start + STREAM_CHUNK).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let chunk = data.subset(&idx);
        let f = mlp_forward(w, &chunk.x)?;
        let duals = duals_from_outputs(&f, &chunk, lik)?;
        let sqrt = sqrt_blocks(&duals).map_err(|e| match e {
            Error::SingularBeta { index, reason } => Error::SingularBeta {
                index: start + index,
                reason,
            },
            other => other,
        })?;
        let j = w.jacobian_stack(&chunk.x)?;
        sink(scale_blocks(&j, &sqrt, c));
        start = end;
    }
    Ok(())
}

pub fn ggn_fit(w_star: &MlpWeights, data: &Dataset, lik: &Likelihood, prior_precision: f64) -> Result<GgnPosterior> {
    check_delta(prior_precision)?;
    let p = w_star.num_params();
    let mut g = DMatrix::<f64>::zeros(p, p);
    sqrt_weighted_jacobians(w_star, data, lik, |u| {
        g.gemm(1.0, &u, &u.transpose(), 1.0);
    })?;
    for i in 0..p {
        g[(i, i)] += prior_precision;
    }
    let precision = SymmetricMatrix::new(g)?;
    let chol_precision = cholesky_psd(&precision)?;
    Ok(GgnPosterior {
        w_star: w_star.clone(),
        precision,
        chol_precision,
        prior_precision,
    })
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Config(format!("prior precision must be positive, got {delta}")));
    }
    Ok(())
}

impl GgnPosterior {
    pub fn precision(&self) -> &SymmetricMatrix {
        &self.precision
    }

    pub fn chol_precision(&self) -> &CholeskyFactor {
        &self.chol_precision
    }

    pub fn prior_precision(&self) -> f64 {
        self.prior_precision
    }

    /// Shifts the prior term of the precision and refactors.
    pub fn with_prior_precision(&self, prior_precision: f64) -> Result<Self> {
        check_delta(prior_precision)?;
        let mut m = self.precision.as_matrix().clone();
        let shift = prior_precision - self.prior_precision;
        for i in 0..m.nrows() {
            m[(i, i)] += shift;
        }
        let precision = SymmetricMatrix::new(m)?;
        let chol_precision = cholesky_psd(&precision)?;
        Ok(GgnPosterior {
            w_star: self.w_star.clone(),
            precision,
            chol_precision,
            prior_precision,
        })
    }

    /// `w* + L⁻ᵀ ε` for `samples` standard-normal draws.
    pub fn sample_weights(&self, samples: usize, seed: u64) -> Result<Vec<MlpWeights>> {
        let p = self.w_star.num_params();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = DMatrix::<f64>::from_fn(p, samples, |_, _| StandardNormal.sample(&mut rng));
        let offsets = self.chol_precision.half_solve_transpose(&eps)?;
        Ok(offsets_to_weights(&self.w_star, &offsets))
    }
}

fn offsets_to_weights(w_star: &MlpWeights, offsets: &DMatrix<f64>) -> Vec<MlpWeights> {
    offsets
        .column_iter()
        .map(|col| w_star.with_params(w_star.w.iter().zip(col.iter()).map(|(a, b)| a + b).collect()))
        .collect()
}

/// Linearized-network predictive: mean `f_{w*}(x)`, covariance
/// `J(x) Σ J(x)ᵀ` with `Σ` the inverse GGN precision.
pub fn predict_glm(
    post: &GgnPosterior,
    x: &DMatrix<f64>,
    lik: &Likelihood,
    method: PushForward,
) -> Result<Vec<PredictiveDistribution>> {
    let f = mlp_forward(&post.w_star, x)?;
    let j = post.w_star.jacobian_stack(x)?;
    let h = post.chol_precision.half_solve(&j)?;
    let c = f.ncols();
    (0..f.nrows())
        .map(|i| {
            let hi = h.columns(i * c, c);
            PredictiveDistribution::from_latent(f.row(i).transpose(), hi.tr_mul(&hi), lik, method, i as u64)
        })
        .collect()
}

/// Monte-Carlo predictive of the nonlinear network under `samples` weight
/// draws from the Laplace posterior.
pub fn predict_bnn(
    post: &GgnPosterior,
    x: &DMatrix<f64>,
    lik: &Likelihood,
    samples: usize,
    seed: u64,
) -> Result<Vec<PredictiveDistribution>> {
    if samples == 0 {
        return Err(Error::Config("BNN predictive needs at least one sample".into()));
    }
    let weights = post.sample_weights(samples, seed)?;
    bnn_average(&weights, x, lik)
}

/// Averages the likelihood over network samples. The latent moments are the
/// sample mean and (population) covariance of the outputs; a Gaussian
/// likelihood is reported by matching the first two moments of the mixture.
pub(crate) fn bnn_average(weights: &[MlpWeights], x: &DMatrix<f64>, lik: &Likelihood) -> Result<Vec<PredictiveDistribution>> {
    let outputs: Vec<DMatrix<f64>> = weights.iter().map(|w| mlp_forward(w, x)).collect::<Result<_>>()?;
    let (n, c) = (x.nrows(), lik.latent_dim());
    let s = outputs.len() as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut mean = DVector::zeros(c);
        for f in &outputs {
            mean += f.row(i).transpose();
        }
        mean /= s;
        let mut cov = DMatrix::zeros(c, c);
        for f in &outputs {
            let d = f.row(i).transpose() - &mean;
            cov += &d * d.transpose();
        }
        cov /= s;
        let output = match *lik {
            Likelihood::Gaussian { noise_variance } => OutputDistribution::Gaussian {
                mean: mean[0],
                variance: cov[(0, 0)] + noise_variance,
            },
            _ => {
                let mut probs: Vec<f64> = Vec::new();
                let mut fi = vec![0.0; c];
                for f in &outputs {
                    for (k, v) in fi.iter_mut().enumerate() {
                        *v = f[(i, k)];
                    }
                    if let OutputDistribution::Classes(p) = lik.point_predictive(&fi) {
                        if probs.is_empty() {
                            probs = vec![0.0; p.len()];
                        }
                        for (a, b) in probs.iter_mut().zip(&p) {
                            *a += b / s;
                        }
                    }
                }
                OutputDistribution::Classes(probs)
            }
        };
        out.push(PredictiveDistribution {
            latent_mean: mean,
            latent_cov: cov,
            output,
        });
    }
    Ok(out)
}

/// Eigendecomposition of the data term of the GGN through its `N·C × N·C`
/// Gram `UᵀU`, so that the posterior covariance is available in closed form
/// for every prior precision:
/// `Σ(δ) = δ⁻¹ I + V diag(1/(δ+λ) − 1/δ) Vᵀ` with orthonormal `V`.
///
/// Nonzero eigenpairs of `UUᵀ` for a `P × K` matrix `U`, taken from whichever
/// of `UᵀU` and `UUᵀ` is smaller. Returns the eigenvalues and orthonormal
/// `P`-dimensional eigenvectors.
pub(crate) fn gram_spectrum(u: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (p, cols) = u.shape();
    if cols == 0 {
        return (DVector::zeros(0), DMatrix::zeros(p, 0));
    }
    if cols <= p {
        let (values, vectors) = symmetric_eigen(&(u.transpose() * u));
        let top = values.max().max(0.0);
        let keep: Vec<usize> = (0..cols).filter(|&k| values[k] > EIGEN_FLOOR * top.max(1.0)).collect();
        let lambdas = DVector::from_iterator(keep.len(), keep.iter().map(|&k| values[k]));
        let q = vectors.select_columns(&keep);
        let mut v = u * q;
        for (k, mut col) in v.column_iter_mut().enumerate() {
            col /= lambdas[k].sqrt();
        }
        (lambdas, v)
    } else {
        let (values, vectors) = symmetric_eigen(&(u * u.transpose()));
        let top = values.max().max(0.0);
        let keep: Vec<usize> = (0..p).filter(|&k| values[k] > EIGEN_FLOOR * top.max(1.0)).collect();
        let lambdas = DVector::from_iterator(keep.len(), keep.iter().map(|&k| values[k]));
        (lambdas, vectors.select_columns(&keep))
    }
}

/// Used to sweep `δ` without refactoring the `P × P` precision.
#[derive(Debug, Clone)]
pub struct GgnSpectrum {
    pub w_star: MlpWeights,
    eigenvalues: DVector<f64>,
    basis: DMatrix<f64>,
}

impl GgnSpectrum {
    pub fn fit(w_star: &MlpWeights, data: &Dataset, lik: &Likelihood) -> Result<Self> {
        let p = w_star.num_params();
        let mut blocks = Vec::new();
        sqrt_weighted_jacobians(w_star, data, lik, |u| blocks.push(u))?;
        let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
        if cols == 0 {
            return Ok(GgnSpectrum {
                w_star: w_star.clone(),
                eigenvalues: DVector::zeros(0),
                basis: DMatrix::zeros(p, 0),
            });
        }
        let mut u = DMatrix::zeros(p, cols);
        let mut at = 0;
        for b in &blocks {
            u.columns_mut(at, b.ncols()).copy_from(b);
            at += b.ncols();
        }
        drop(blocks);
        let (eigenvalues, basis) = gram_spectrum(&u);
        Ok(GgnSpectrum {
            w_star: w_star.clone(),
            eigenvalues,
            basis,
        })
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Projects test Jacobians once so that [`GlmProjection::moments`] is
    /// cheap for every `δ`.
    pub fn project(&self, x: &DMatrix<f64>) -> Result<GlmProjection> {
        let f = mlp_forward(&self.w_star, x)?;
        let j = self.w_star.jacobian_stack(x)?;
        Ok(GlmProjection::new(f, false, &j, &self.basis, self.eigenvalues.clone()))
    }

    pub fn predict_glm(&self, x: &DMatrix<f64>, delta: f64, lik: &Likelihood, method: PushForward) -> Result<Vec<PredictiveDistribution>> {
        self.project(x)?.predict(delta, lik, method)
    }

    /// `w* + Σ(δ)^{1/2} ε` using the symmetric square root of the covariance.
    pub fn sample_weights(&self, delta: f64, samples: usize, seed: u64) -> Result<Vec<MlpWeights>> {
        check_delta(delta)?;
        let p = self.w_star.num_params();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = DMatrix::<f64>::from_fn(p, samples, |_, _| StandardNormal.sample(&mut rng));
        let base = delta.sqrt().recip();
        let mut coeff = self.basis.transpose() * &eps;
        for (k, mut row) in coeff.row_iter_mut().enumerate() {
            row *= (delta + self.eigenvalues[k]).sqrt().recip() - base;
        }
        let mut offsets = &eps * base;
        offsets.gemm(1.0, &self.basis, &coeff, 1.0);
        Ok(offsets_to_weights(&self.w_star, &offsets))
    }

    pub fn predict_bnn(&self, x: &DMatrix<f64>, delta: f64, lik: &Likelihood, samples: usize, seed: u64) -> Result<Vec<PredictiveDistribution>> {
        if samples == 0 {
            return Err(Error::Config("BNN predictive needs at least one sample".into()));
        }
        bnn_average(&self.sample_weights(delta, samples, seed)?, x, lik)
    }
}

/// Test-side quantities for the spectral GLM predictive.
#[derive(Debug, Clone)]
pub struct GlmProjection {
    /// `N* × C` latent means; divided by `δ` when `mean_scales` is set.
    f: DMatrix<f64>,
    mean_scales: bool,
    self_blocks: Vec<DMatrix<f64>>,
    projected: DMatrix<f64>,
    eigenvalues: DVector<f64>,
}

impl GlmProjection {
    /// Test-side quantities from the test Jacobians `j` (`P × N*·C`) and an
    /// orthonormal eigenbasis of the data term.
    pub(crate) fn new(f: DMatrix<f64>, mean_scales: bool, j: &DMatrix<f64>, basis: &DMatrix<f64>, eigenvalues: DVector<f64>) -> Self {
        let c = f.ncols();
        let self_blocks = (0..f.nrows())
            .map(|i| {
                let ji = j.columns(i * c, c);
                ji.tr_mul(&ji)
            })
            .collect();
        GlmProjection {
            f,
            mean_scales,
            self_blocks,
            projected: basis.transpose() * j,
            eigenvalues,
        }
    }

    pub fn moments(&self, delta: f64) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
        check_delta(delta)?;
        let c = self.f.ncols();
        let mut scaled = self.projected.clone();
        for (k, mut row) in scaled.row_iter_mut().enumerate() {
            row *= (delta.recip() - (delta + self.eigenvalues[k]).recip()).max(0.0).sqrt();
        }
        Ok((0..self.f.nrows())
            .map(|i| {
                let a = scaled.columns(i * c, c);
                let cov = &self.self_blocks[i] / delta - a.tr_mul(&a);
                let mean = self.f.row(i).transpose();
                (if self.mean_scales { mean / delta } else { mean }, cov)
            })
            .collect())
    }

    pub fn predict(&self, delta: f64, lik: &Likelihood, method: PushForward) -> Result<Vec<PredictiveDistribution>> {
        self.moments(delta)?
            .into_iter()
            .enumerate()
            .map(|(i, (m, v))| PredictiveDistribution::from_latent(m, v, lik, method, i as u64))
            .collect()
    }
}
