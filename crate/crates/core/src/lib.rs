//! Sparse function-space uncertainty for trained multilayer perceptrons.
//!
//! A MAP-trained network is turned into a Gaussian process over its outputs
//! through the neural tangent kernel at the trained weights. The posterior is
//! parameterized by per-point dual coefficients (the gradient and negated
//! Hessian of the log-likelihood at the network outputs) and sparsified
//! through inducing inputs, so new data can be absorbed without retraining.
//! Weight-space Laplace baselines (BNN and GLM predictives) and a benchmark
//! pipeline are included.

pub mod data;
pub mod error;
pub mod experiment;
pub mod kernel;
pub mod likelihood;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod posterior;
pub mod tuning;

pub use data::{load_csv, load_features, split_standardize, CsvSchema, Dataset, Splits};
pub use error::{Error, Result};
pub use kernel::{InputSet, JacobianCache, NtkKernel};
pub use likelihood::{DualCoefficients, Likelihood, OutputDistribution, PushForward, Target};
pub use linalg::{CholeskyFactor, SymmetricMatrix};
pub use nn::{Checkpoint, MlpArchitecture, MlpWeights, TrainConfig};
pub use posterior::{PredictiveDistribution, SfrState};
