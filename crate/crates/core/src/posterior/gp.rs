//! Function-space GP posteriors over a set of conditioning points.
//!
//! The posterior covariance `k_ii - k_xiᵀ (K + β⁻¹)⁻¹ k_xi` is evaluated in
//! the inverse-free form `S (S K S + I)⁻¹ S` with `S = β^{1/2}` so singular
//! softmax blocks need no special treatment.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::ggn::{gram_spectrum, GlmProjection};
use super::{column_block, compute_duals, row_vector, scale_blocks, sqrt_blocks, weighted_sum, PredictiveDistribution};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{jacobians_for, InputSet, JacobianCache, NtkKernel};
use crate::likelihood::{DualCoefficients, Likelihood, PushForward};
use crate::linalg::{cholesky_psd, CholeskyFactor, SymmetricMatrix};
use crate::nn::{mlp_forward, MlpWeights};

/// What the predictive mean is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanSource {
    /// `k_xᵀ α̂`, the GP mean of the dual parameterization.
    Dual,
    /// The network output `f_{w*}(x)`.
    Network,
}

#[derive(Debug, Clone)]
pub struct FunctionSpaceGp {
    kernel: NtkKernel,
    mean_source: MeanSource,
    /// `J_X S`, with `S = blockdiag(β̂ᵢ^{1/2})`.
    js: DMatrix<f64>,
    /// `J_X α̂`.
    j_alpha: DVector<f64>,
    /// `S K S` at the current prior precision.
    sks: DMatrix<f64>,
    chol: Option<CholeskyFactor>,
    num_points: usize,
}

impl FunctionSpaceGp {
    pub fn fit(
        kernel: &NtkKernel,
        train: InputSet<'_>,
        duals: &DualCoefficients,
        cache: Option<&JacobianCache>,
        mean_source: MeanSource,
    ) -> Result<Self> {
        let c = kernel.block_dim();
        if duals.len() != train.x.nrows() || (duals.latent_dim() != c && !duals.is_empty()) {
            return Err(Error::DimensionMismatch {
                context: "FunctionSpaceGp::fit duals vs inputs",
                expected: train.x.nrows(),
                found: duals.len(),
            });
        }
        let p = kernel.weights().num_params();
        if duals.is_empty() {
            return Ok(FunctionSpaceGp {
                kernel: kernel.clone(),
                mean_source,
                js: DMatrix::zeros(p, 0),
                j_alpha: DVector::zeros(p),
                sks: DMatrix::zeros(0, 0),
                chol: None,
                num_points: 0,
            });
        }
        let j = jacobians_for(kernel.weights(), train, cache)?;
        let sqrt = sqrt_blocks(duals)?;
        let js = scale_blocks(&j, &sqrt, c);
        let j_alpha = weighted_sum(&j, duals);
        let mut sks = js.transpose() * &js;
        sks /= kernel.prior_precision();
        Self::assemble(kernel.clone(), mean_source, js, j_alpha, sks, duals.len())
    }

    fn assemble(
        kernel: NtkKernel,
        mean_source: MeanSource,
        js: DMatrix<f64>,
        j_alpha: DVector<f64>,
        sks: DMatrix<f64>,
        num_points: usize,
    ) -> Result<Self> {
        let mut a = sks.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += 1.0;
        }
        let chol = cholesky_psd(&SymmetricMatrix::new(a)?)?;
        Ok(FunctionSpaceGp {
            kernel,
            mean_source,
            js,
            j_alpha,
            sks,
            chol: Some(chol),
            num_points,
        })
    }

    /// Rebuilds the posterior for a new prior precision without touching the
    /// network.
    pub fn with_prior_precision(&self, prior_precision: f64) -> Result<Self> {
        let kernel = self.kernel.with_prior_precision(prior_precision)?;
        if self.num_points == 0 {
            return Ok(FunctionSpaceGp {
                kernel,
                ..self.clone()
            });
        }
        let sks = &self.sks * (self.kernel.prior_precision() / prior_precision);
        Self::assemble(kernel, self.mean_source, self.js.clone(), self.j_alpha.clone(), sks, self.num_points)
    }

    pub fn kernel(&self) -> &NtkKernel {
        &self.kernel
    }

    pub fn num_points(&self) -> usize {
        self.num_points
    }

    /// Latent means and covariances from test Jacobians (`P × N*·C`) and,
    /// for [`MeanSource::Network`], the network outputs (`N* × C`).
    pub fn latent_moments(&self, j_test: &DMatrix<f64>, f_test: Option<&DMatrix<f64>>) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
        let c = self.kernel.block_dim();
        let p = self.kernel.weights().num_params();
        if j_test.nrows() != p || j_test.ncols() % c != 0 {
            return Err(Error::DimensionMismatch {
                context: "FunctionSpaceGp test Jacobians",
                expected: p,
                found: j_test.nrows(),
            });
        }
        let n_test = j_test.ncols() / c;
        let delta = self.kernel.prior_precision();
        let half = match &self.chol {
            Some(chol) => {
                let mut kx = self.js.transpose() * j_test;
                kx /= delta;
                Some(chol.half_solve(&kx)?)
            }
            None => None,
        };
        let dual_mean = match self.mean_source {
            MeanSource::Dual => Some(j_test.transpose() * &self.j_alpha / delta),
            MeanSource::Network => None,
        };
        let f_test = match (self.mean_source, f_test) {
            (MeanSource::Network, Some(f)) if f.nrows() == n_test && f.ncols() == c => Some(f),
            (MeanSource::Network, _) => {
                return Err(Error::Config("network-centred GP needs network outputs at the test inputs".into()))
            }
            _ => None,
        };
        let mut out = Vec::with_capacity(n_test);
        for i in 0..n_test {
            let ji = j_test.columns(i * c, c);
            let mut cov = ji.tr_mul(&ji) / delta;
            if let Some(h) = &half {
                let hi = column_block(h, i, c);
                cov -= hi.tr_mul(&hi);
            }
            let mean = match (&dual_mean, f_test) {
                (Some(m), _) => m.rows(i * c, c).into_owned(),
                (None, Some(f)) => row_vector(f, i),
                (None, None) => unreachable!(),
            };
            out.push((mean, cov));
        }
        Ok(out)
    }

    /// Spectral form of the predictive at the test Jacobians, from which the
    /// moments at any prior precision follow without refactoring. Gives the
    /// same moments as [`Self::with_prior_precision`] followed by
    /// [`Self::latent_moments`].
    pub fn project(&self, j_test: &DMatrix<f64>, f_test: Option<&DMatrix<f64>>) -> Result<GlmProjection> {
        let c = self.kernel.block_dim();
        let p = self.kernel.weights().num_params();
        if j_test.nrows() != p || j_test.ncols() % c != 0 {
            return Err(Error::DimensionMismatch {
                context: "FunctionSpaceGp test Jacobians",
                expected: p,
                found: j_test.nrows(),
            });
        }
        let n_test = j_test.ncols() / c;
        let (mean, scales) = match (self.mean_source, f_test) {
            (MeanSource::Dual, _) => {
                let m = j_test.transpose() * &self.j_alpha;
                (DMatrix::from_row_slice(n_test, c, m.as_slice()), true)
            }
            (MeanSource::Network, Some(f)) if f.nrows() == n_test && f.ncols() == c => (f.clone(), false),
            (MeanSource::Network, _) => {
                return Err(Error::Config("network-centred GP needs network outputs at the test inputs".into()))
            }
        };
        let (eigenvalues, basis) = gram_spectrum(&self.js);
        Ok(GlmProjection::new(mean, scales, j_test, &basis, eigenvalues))
    }

    pub fn predict_stack(
        &self,
        j_test: &DMatrix<f64>,
        f_test: Option<&DMatrix<f64>>,
        lik: &Likelihood,
        method: PushForward,
    ) -> Result<Vec<PredictiveDistribution>> {
        self.latent_moments(j_test, f_test)?
            .into_iter()
            .enumerate()
            .map(|(i, (m, v))| PredictiveDistribution::from_latent(m, v, lik, method, i as u64))
            .collect()
    }

    pub fn predict(
        &self,
        x: InputSet<'_>,
        cache: Option<&JacobianCache>,
        lik: &Likelihood,
        method: PushForward,
    ) -> Result<Vec<PredictiveDistribution>> {
        let j = jacobians_for(self.kernel.weights(), x, cache)?;
        let f = match self.mean_source {
            MeanSource::Network => Some(mlp_forward(self.kernel.weights(), x.x)?),
            MeanSource::Dual => None,
        };
        self.predict_stack(&j, f.as_ref(), lik, method)
    }
}

/// Function-space Laplace predictive centred on the network, conditioned only
/// on `subset`.
pub fn predict_gp_subset(
    w_star: &MlpWeights,
    subset: &Dataset,
    lik: &Likelihood,
    prior_precision: f64,
    x: &DMatrix<f64>,
    method: PushForward,
) -> Result<Vec<PredictiveDistribution>> {
    if subset.is_empty() {
        return Err(Error::EmptySplit { split: "gp subset", n: 0 });
    }
    let kernel = NtkKernel::new(w_star.clone(), prior_precision)?;
    let duals = compute_duals(w_star, subset, lik)?;
    let gp = FunctionSpaceGp::fit(&kernel, InputSet::anonymous(&subset.x), &duals, None, MeanSource::Network)
        .map_err(|e| match e {
            Error::SingularBeta { index, reason } => Error::SingularLambda { index, reason },
            other => other,
        })?;
    gp.predict(InputSet::anonymous(x), None, lik, method)
}

/// Dual-parameter GP predictive conditioned on every point: mean `k_xᵀ α̂`.
pub fn predict_dual_full(
    w_star: &MlpWeights,
    duals: &DualCoefficients,
    data_x: &DMatrix<f64>,
    prior_precision: f64,
    x: &DMatrix<f64>,
    lik: &Likelihood,
    method: PushForward,
) -> Result<Vec<PredictiveDistribution>> {
    let kernel = NtkKernel::from_shared(Arc::new(w_star.clone()), prior_precision)?;
    let gp = FunctionSpaceGp::fit(&kernel, InputSet::anonymous(data_x), duals, None, MeanSource::Dual)?;
    gp.predict(InputSet::anonymous(x), None, lik, method)
}
