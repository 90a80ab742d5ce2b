//! Predictive engines built on a trained network: weight-space Laplace
//! (BNN and GLM), the function-space GP centred on the network
//! (GP subset), the full dual-parameter GP, and its sparse counterpart
//! conditioned through inducing points.

mod ggn;
mod gp;
mod inducing;
mod sfr;

pub use ggn::{ggn_fit, predict_bnn, predict_glm, GgnPosterior, GgnSpectrum, GlmProjection};
pub use gp::{predict_dual_full, predict_gp_subset, FunctionSpaceGp, MeanSource};
pub use inducing::{inducing_count, select_inducing, Inducing};
pub use sfr::{sfr_fit, sfr_predict, sfr_update, SfrFile, SfrState, SFR_FILE_VERSION};

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::likelihood::{DualCoefficients, Likelihood, OutputDistribution, PushForward};
use crate::linalg::{psd_sqrt, symmetrize_in_place};
use crate::nn::{mlp_forward, MlpWeights};

/// Points processed per accumulation chunk when streaming over data.
pub(crate) const STREAM_CHUNK: usize = 256;

const NEGATIVE_VARIANCE_TOL: f64 = 1e-10;

/// Latent Gaussian moments at one input and the matching output distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub latent_mean: DVector<f64>,
    pub latent_cov: DMatrix<f64>,
    pub output: OutputDistribution,
}

impl PredictiveDistribution {
    /// Symmetrizes the covariance, clamps slightly negative variances to zero
    /// and pushes the latent Gaussian through the likelihood.
    pub fn from_latent(
        mean: DVector<f64>,
        mut cov: DMatrix<f64>,
        lik: &Likelihood,
        method: PushForward,
        stream: u64,
    ) -> Result<Self> {
        symmetrize_in_place(&mut cov);
        for i in 0..cov.nrows() {
            let v = cov[(i, i)];
            if v < 0.0 {
                if v < -NEGATIVE_VARIANCE_TOL {
                    warn!("clamping latent variance {v:.3e} to zero");
                }
                cov[(i, i)] = 0.0;
            }
        }
        let output = lik.push_forward(&mean, &cov, method, stream)?;
        Ok(PredictiveDistribution {
            latent_mean: mean,
            latent_cov: cov,
            output,
        })
    }
}

/// Network point predictions for every row of `x`, with zero latent
/// covariance.
pub fn predict_map(w: &MlpWeights, x: &DMatrix<f64>, lik: &Likelihood) -> Result<Vec<PredictiveDistribution>> {
    let f = mlp_forward(w, x)?;
    Ok((0..f.nrows())
        .map(|i| {
            let m: Vec<f64> = f.row(i).iter().copied().collect();
            PredictiveDistribution {
                output: lik.point_predictive(&m),
                latent_mean: DVector::from_vec(m),
                latent_cov: DMatrix::zeros(f.ncols(), f.ncols()),
            }
        })
        .collect())
}

/// Per-point gradient and negated Hessian of the log-likelihood at the
/// network outputs, in dataset order.
pub fn compute_duals(w: &MlpWeights, data: &Dataset, lik: &Likelihood) -> Result<DualCoefficients> {
    let c = lik.latent_dim();
    if c != w.output_dim() {
        return Err(Error::DimensionMismatch {
            context: "compute_duals: likelihood vs network outputs",
            expected: w.output_dim(),
            found: c,
        });
    }
    if data.is_empty() {
        return Ok(DualCoefficients::empty(c));
    }
    let f = mlp_forward(w, &data.x)?;
    duals_from_outputs(&f, data, lik)
}

pub(crate) fn duals_from_outputs(f: &DMatrix<f64>, data: &Dataset, lik: &Likelihood) -> Result<DualCoefficients> {
    let (n, c) = (f.nrows(), f.ncols());
    let mut alpha = DMatrix::zeros(n, c);
    let mut beta = Vec::with_capacity(n);
    let mut fi = vec![0.0; c];
    for i in 0..n {
        for (k, v) in fi.iter_mut().enumerate() {
            *v = f[(i, k)];
        }
        let y = data.target(i);
        let g = lik.grad_f(y, &fi)?;
        for k in 0..c {
            alpha[(i, k)] = g[k];
        }
        beta.push(lik.hess_f(y, &fi)?);
    }
    Ok(DualCoefficients {
        alpha_hat: alpha,
        beta_hat: beta,
    })
}

/// PSD square roots of the `β̂` blocks.
pub(crate) fn sqrt_blocks(duals: &DualCoefficients) -> Result<Vec<DMatrix<f64>>> {
    duals
        .beta_hat
        .iter()
        .enumerate()
        .map(|(i, b)| {
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::SingularBeta {
                    index: i,
                    reason: "non-finite entries".into(),
                });
            }
            Ok(psd_sqrt(b))
        })
        .collect()
}

/// `J · blockdiag(blocks)` for a stack with `C` columns per point.
pub(crate) fn scale_blocks(j: &DMatrix<f64>, blocks: &[DMatrix<f64>], c: usize) -> DMatrix<f64> {
    debug_assert_eq!(j.ncols(), blocks.len() * c);
    if c == 1 {
        let mut out = j.clone();
        for (i, mut col) in out.column_iter_mut().enumerate() {
            col *= blocks[i][(0, 0)];
        }
        return out;
    }
    let mut out = DMatrix::zeros(j.nrows(), j.ncols());
    for (i, b) in blocks.iter().enumerate() {
        let src = j.columns(i * c, c);
        out.columns_mut(i * c, c).copy_from(&(src * b));
    }
    out
}

/// `J · α̂` for a stack and duals in matching order.
pub(crate) fn weighted_sum(j: &DMatrix<f64>, duals: &DualCoefficients) -> DVector<f64> {
    j * duals.stacked_alpha()
}

/// Columns `C` at a time of a `rows × N·C` matrix, as owned blocks.
pub(crate) fn column_block(m: &DMatrix<f64>, i: usize, c: usize) -> DMatrix<f64> {
    m.columns(i * c, c).into_owned()
}

/// Row `i` of `f` as a vector.
pub(crate) fn row_vector(f: &DMatrix<f64>, i: usize) -> DVector<f64> {
    f.row(i).transpose()
}
