//! Sparse function-space posterior: dual parameters projected onto a set of
//! inducing inputs.
//!
//! With `k_z(x) = K_zx` the predictive moments are
//! `mean = k_zᵀ K_zz⁻¹ α_u` and
//! `var = k_xx − k_zᵀ K_zz⁻¹ k_z + k_zᵀ (K_zz + B_u)⁻¹ k_z`, where
//! `α_u = Σᵢ K_zi α̂ᵢ` and `B_u = Σᵢ K_zi β̂ᵢ K_iz` are plain sums over the
//! data, so new data is absorbed by adding its terms.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{column_block, duals_from_outputs, scale_blocks, sqrt_blocks, PredictiveDistribution, STREAM_CHUNK};
use crate::data::{Dataset, Standardization};
use crate::error::{Error, Result};
use crate::kernel::NtkKernel;
use crate::likelihood::{Likelihood, PushForward};
use crate::linalg::{absolute_jitter, cholesky_psd, cholesky_psd_shifted, symmetric_eigen, symmetrize_in_place, CholeskyFactor, SymmetricMatrix};
use crate::nn::{mlp_forward, MlpArchitecture, MlpWeights};

pub const SFR_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct SfrState {
    kernel: NtkKernel,
    /// `M × D` inducing inputs.
    z: DMatrix<f64>,
    /// `P × M·C` Jacobians at the inducing inputs.
    jz: Arc<DMatrix<f64>>,
    alpha_u: DVector<f64>,
    b_u: DMatrix<f64>,
    chol_kzz: CholeskyFactor,
    chol_kzz_plus_bu: CholeskyFactor,
    /// `K_zz⁻¹ α_u`.
    weights_u: DVector<f64>,
    num_points_absorbed: usize,
}

/// Sparse dual terms `(Σ J_zᵀJᵢα̂ᵢ, Σ (J_zᵀJᵢ)β̂ᵢ(J_zᵀJᵢ)ᵀ)` for `data`, without the
/// `1/δ` and `1/δ²` kernel factors, accumulated in dataset order.
fn sparse_terms(w: &MlpWeights, jz: &DMatrix<f64>, data: &Dataset, lik: &Likelihood) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let c = lik.latent_dim();
    if c != w.output_dim() {
        return Err(Error::DimensionMismatch {
            context: "sfr likelihood vs network outputs",
            expected: w.output_dim(),
            found: c,
        });
    }
    let mc = jz.ncols();
    let mut alpha = DVector::zeros(mc);
    let mut b = DMatrix::zeros(mc, mc);
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
        let kzx = jz.transpose() * w.jacobian_stack(&chunk.x)?;
        alpha.gemv(1.0, &kzx, &duals.stacked_alpha(), 1.0);
        let ks = scale_blocks(&kzx, &sqrt, c);
        b.gemm(1.0, &ks, &ks.transpose(), 1.0);
        start = end;
    }
    Ok((alpha, b))
}

impl SfrState {
    pub fn fit(kernel: &NtkKernel, data: &Dataset, lik: &Likelihood, z: &DMatrix<f64>) -> Result<Self> {
        if z.nrows() == 0 {
            return Err(Error::InvalidM { m: 0, n: data.len() });
        }
        check_inputs(kernel, z.ncols(), "sfr inducing inputs")?;
        check_inputs(kernel, data.input_dim(), "sfr data").or_else(|e| if data.is_empty() { Ok(()) } else { Err(e) })?;
        let jz = Arc::new(kernel.weights().jacobian_stack(z)?);
        let (alpha, b) = sparse_terms(kernel.weights(), &jz, data, lik)?;
        let delta = kernel.prior_precision();
        Self::assemble(kernel.clone(), z.clone(), jz, alpha / delta, b / (delta * delta), data.len())
    }

    fn assemble(
        kernel: NtkKernel,
        z: DMatrix<f64>,
        jz: Arc<DMatrix<f64>>,
        alpha_u: DVector<f64>,
        mut b_u: DMatrix<f64>,
        num_points_absorbed: usize,
    ) -> Result<Self> {
        symmetrize_in_place(&mut b_u);
        let kzz = jz.transpose() * &*jz / kernel.prior_precision();
        let kzz = SymmetricMatrix::new(kzz)?;
        let chol_kzz = cholesky_psd(&kzz)?;
        // The same absolute shift on both factors keeps the predictive that of
        // one (jittered) prior.
        let shift = absolute_jitter(&chol_kzz, &kzz);
        let chol_kzz_plus_bu = cholesky_psd_shifted(&SymmetricMatrix::new(kzz.into_inner() + &b_u)?, shift)?;
        let weights_u = chol_kzz.solve_vector(&alpha_u)?;
        Ok(SfrState {
            kernel,
            z,
            jz,
            alpha_u,
            b_u,
            chol_kzz,
            chol_kzz_plus_bu,
            weights_u,
            num_points_absorbed,
        })
    }

    /// Absorbs `new_data` into the sparse dual parameters. `Z` and the
    /// network are unchanged.
    pub fn update(&self, new_data: &Dataset, lik: &Likelihood) -> Result<Self> {
        if new_data.is_empty() {
            return Self::assemble(
                self.kernel.clone(),
                self.z.clone(),
                self.jz.clone(),
                self.alpha_u.clone(),
                self.b_u.clone(),
                self.num_points_absorbed,
            );
        }
        check_inputs(&self.kernel, new_data.input_dim(), "sfr_update")?;
        let (alpha, b) = sparse_terms(self.kernel.weights(), &self.jz, new_data, lik)?;
        let delta = self.kernel.prior_precision();
        Self::assemble(
            self.kernel.clone(),
            self.z.clone(),
            self.jz.clone(),
            &self.alpha_u + alpha / delta,
            &self.b_u + b / (delta * delta),
            self.num_points_absorbed + new_data.len(),
        )
    }

    /// Same data and inducing inputs under a different prior precision. The
    /// kernel scales as `1/δ`, so `α_u` scales as `1/δ` and `B_u` as `1/δ²`.
    pub fn with_prior_precision(&self, prior_precision: f64) -> Result<Self> {
        let kernel = self.kernel.with_prior_precision(prior_precision)?;
        let r = self.kernel.prior_precision() / prior_precision;
        Self::assemble(
            kernel,
            self.z.clone(),
            self.jz.clone(),
            &self.alpha_u * r,
            &self.b_u * (r * r),
            self.num_points_absorbed,
        )
    }

    pub fn kernel(&self) -> &NtkKernel {
        &self.kernel
    }

    pub fn inducing_inputs(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn alpha_u(&self) -> &DVector<f64> {
        &self.alpha_u
    }

    pub fn b_u(&self) -> &DMatrix<f64> {
        &self.b_u
    }

    pub fn chol_kzz(&self) -> &CholeskyFactor {
        &self.chol_kzz
    }

    pub fn chol_kzz_plus_bu(&self) -> &CholeskyFactor {
        &self.chol_kzz_plus_bu
    }

    pub fn num_points_absorbed(&self) -> usize {
        self.num_points_absorbed
    }

    pub fn num_inducing(&self) -> usize {
        self.z.nrows()
    }

    /// Latent moments from test Jacobians (`P × N*·C`).
    pub fn latent_moments(&self, j_test: &DMatrix<f64>) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
        let c = self.kernel.block_dim();
        if j_test.nrows() != self.jz.nrows() || j_test.ncols() % c != 0 {
            return Err(Error::DimensionMismatch {
                context: "sfr test Jacobians",
                expected: self.jz.nrows(),
                found: j_test.nrows(),
            });
        }
        let delta = self.kernel.prior_precision();
        let kzx = self.jz.transpose() * j_test / delta;
        let mean = kzx.transpose() * &self.weights_u;
        let prior_part = self.chol_kzz.half_solve(&kzx)?;
        let data_part = self.chol_kzz_plus_bu.half_solve(&kzx)?;
        Ok((0..j_test.ncols() / c)
            .map(|i| {
                let ji = j_test.columns(i * c, c);
                let a = column_block(&prior_part, i, c);
                let b = column_block(&data_part, i, c);
                let cov = ji.tr_mul(&ji) / delta - a.tr_mul(&a) + b.tr_mul(&b);
                (mean.rows(i * c, c).into_owned(), cov)
            })
            .collect())
    }

    /// Spectral form of the predictive at the test Jacobians. With the
    /// unscaled `K̃ = J_zᵀJ_z = L̃L̃ᵀ` and `B̃ = δ²B_u`, the data term at prior
    /// precision `d` is `k̃ᵀ(dK̃ + B̃)⁻¹k̃ = k̃ᵀL̃⁻ᵀ Q (dI + Λ)⁻¹ Qᵀ L̃⁻¹k̃` for
    /// `L̃⁻¹B̃L̃⁻ᵀ = QΛQᵀ`, so one eigendecomposition serves every `d`.
    pub fn project(&self, j_test: &DMatrix<f64>) -> Result<SfrProjection> {
        let c = self.kernel.block_dim();
        if j_test.nrows() != self.jz.nrows() || j_test.ncols() % c != 0 {
            return Err(Error::DimensionMismatch {
                context: "sfr test Jacobians",
                expected: self.jz.nrows(),
                found: j_test.nrows(),
            });
        }
        let delta = self.kernel.prior_precision();
        let chol = cholesky_psd(&SymmetricMatrix::new(self.jz.transpose() * &*self.jz)?)?;
        let lb = chol.half_solve(&(&self.b_u * (delta * delta)))?;
        let mut g = chol.half_solve(&lb.transpose())?;
        symmetrize_in_place(&mut g);
        let (eigenvalues, eigenvectors) = symmetric_eigen(&g);
        let a = chol.half_solve(&(self.jz.transpose() * j_test))?;
        let a_alpha = chol.half_solve(&DMatrix::from_column_slice(self.alpha_u.len(), 1, (&self.alpha_u * delta).as_slice()))?;
        let mean = (a.transpose() * a_alpha).column(0).into_owned();
        let n_test = j_test.ncols() / c;
        let prior_resid = (0..n_test)
            .map(|i| {
                let ji = j_test.columns(i * c, c);
                let ai = column_block(&a, i, c);
                ji.tr_mul(&ji) - ai.tr_mul(&ai)
            })
            .collect();
        Ok(SfrProjection {
            latent_dim: c,
            mean,
            prior_resid,
            data_part: eigenvectors.transpose() * &a,
            eigenvalues: eigenvalues.map(|l| l.max(0.0)),
        })
    }

    pub fn predict(&self, x: &DMatrix<f64>, lik: &Likelihood, method: PushForward) -> Result<Vec<PredictiveDistribution>> {
        check_inputs(&self.kernel, x.ncols(), "sfr_predict")?;
        let j = self.kernel.weights().jacobian_stack(x)?;
        self.predict_stack(&j, lik, method)
    }

    pub fn predict_stack(&self, j_test: &DMatrix<f64>, lik: &Likelihood, method: PushForward) -> Result<Vec<PredictiveDistribution>> {
        self.latent_moments(j_test)?
            .into_iter()
            .enumerate()
            .map(|(i, (m, v))| PredictiveDistribution::from_latent(m, v, lik, method, i as u64))
            .collect()
    }

    pub fn to_file(&self) -> SfrFile {
        let w = self.kernel.weights();
        let (m, d) = self.z.shape();
        SfrFile {
            version: SFR_FILE_VERSION,
            architecture: w.arch.clone(),
            weights: w.w.clone(),
            prior_precision: self.kernel.prior_precision(),
            num_inducing: m,
            input_dim: d,
            z: row_major(&self.z),
            alpha_u: self.alpha_u.as_slice().to_vec(),
            b_u: row_major(&self.b_u),
            num_points_absorbed: self.num_points_absorbed,
            likelihood: None,
            standardization: None,
            class_names: Vec::new(),
        }
    }

    pub fn from_file(file: &SfrFile) -> Result<Self> {
        if file.version != SFR_FILE_VERSION {
            return Err(Error::Version {
                expected: SFR_FILE_VERSION,
                found: file.version,
            });
        }
        let weights = MlpWeights::new(file.architecture.clone(), file.weights.clone())?;
        let c = weights.output_dim();
        let mc = file.num_inducing * c;
        let expect = |len: usize, want: usize, context: &'static str| {
            if len == want {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    context,
                    expected: want,
                    found: len,
                })
            }
        };
        expect(file.z.len(), file.num_inducing * file.input_dim, "sfr file Z")?;
        expect(file.alpha_u.len(), mc, "sfr file alpha_u")?;
        expect(file.b_u.len(), mc * mc, "sfr file B_u")?;
        let kernel = NtkKernel::new(weights, file.prior_precision)?;
        let z = DMatrix::from_row_slice(file.num_inducing, file.input_dim, &file.z);
        check_inputs(&kernel, z.ncols(), "sfr file Z")?;
        let jz = Arc::new(kernel.weights().jacobian_stack(&z)?);
        Self::assemble(
            kernel,
            z,
            jz,
            DVector::from_column_slice(&file.alpha_u),
            DMatrix::from_row_slice(mc, mc, &file.b_u),
            file.num_points_absorbed,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>, likelihood: Option<&Likelihood>) -> Result<()> {
        let mut file = self.to_file();
        file.likelihood = likelihood.cloned();
        file.save(path)
    }
}

/// Test-side quantities for evaluating an SFR predictive at many prior
/// precisions; see [`SfrState::project`].
#[derive(Debug, Clone)]
pub struct SfrProjection {
    latent_dim: usize,
    /// `k̃ᵀK̃⁻¹α̃_u`, stacked over test points.
    mean: DVector<f64>,
    /// `k̃ᵢᵢ − k̃ᵢᵀK̃⁻¹k̃ᵢ` per test point.
    prior_resid: Vec<DMatrix<f64>>,
    /// `QᵀL̃⁻¹k̃`.
    data_part: DMatrix<f64>,
    eigenvalues: DVector<f64>,
}

impl SfrProjection {
    pub fn moments(&self, delta: f64) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!("prior precision {delta} must be positive and finite")));
        }
        let c = self.latent_dim;
        let mut scaled = self.data_part.clone();
        for (k, mut row) in scaled.row_iter_mut().enumerate() {
            row /= (delta + self.eigenvalues[k]).sqrt();
        }
        Ok(self
            .prior_resid
            .iter()
            .enumerate()
            .map(|(i, resid)| {
                let b = column_block(&scaled, i, c);
                let cov = resid / delta + b.tr_mul(&b);
                (self.mean.rows(i * c, c) / delta, cov)
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

fn check_inputs(kernel: &NtkKernel, cols: usize, context: &'static str) -> Result<()> {
    let d = kernel.weights().arch.input_dim;
    if cols != d {
        return Err(Error::DimensionMismatch {
            context,
            expected: d,
            found: cols,
        });
    }
    Ok(())
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// On-disk form of a fitted [`SfrState`]. Kernel factors are rebuilt on
/// load from the network and `Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfrFile {
    pub version: u32,
    pub architecture: MlpArchitecture,
    pub weights: Vec<f64>,
    pub prior_precision: f64,
    pub num_inducing: usize,
    pub input_dim: usize,
    /// Row-major `M × D`.
    pub z: Vec<f64>,
    pub alpha_u: Vec<f64>,
    /// Row-major `M·C × M·C`.
    pub b_u: Vec<f64>,
    pub num_points_absorbed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub likelihood: Option<Likelihood>,
    /// Input standardization expected by the network.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
    /// Class labels in index order, as read from the training file.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
}

impl SfrFile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SfrFile = serde_json::from_str(&text)?;
        if file.version != SFR_FILE_VERSION {
            return Err(Error::Version {
                expected: SFR_FILE_VERSION,
                found: file.version,
            });
        }
        Ok(file)
    }
}

pub fn sfr_fit(w_star: &MlpWeights, data: &Dataset, lik: &Likelihood, z: &DMatrix<f64>, prior_precision: f64) -> Result<SfrState> {
    let kernel = NtkKernel::new(w_star.clone(), prior_precision)?;
    SfrState::fit(&kernel, data, lik, z)
}

pub fn sfr_predict(state: &SfrState, x: &DMatrix<f64>, lik: &Likelihood, method: PushForward) -> Result<Vec<PredictiveDistribution>> {
    state.predict(x, lik, method)
}

pub fn sfr_update(state: &SfrState, new_data: &Dataset, lik: &Likelihood) -> Result<SfrState> {
    state.update(new_data, lik)
}
