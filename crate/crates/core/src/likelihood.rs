//! Likelihood families in latent-function space.
//!
//! Each family supplies `log p(y | f)`, its gradient in `f` and the negated
//! Hessian in `f`. The gradient and negated Hessian evaluated at the network
//! output are the per-point dual coefficients.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::psd_factor;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Likelihood {
    /// Scalar regression with fixed noise variance.
    Gaussian { noise_variance: f64 },
    /// Binary classification with a single logit; labels are classes 0 and 1.
    BernoulliLogit,
    /// Multiclass classification with one logit per class.
    CategoricalSoftmax { num_classes: usize },
}

/// One observed target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Value(f64),
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Target::Class(c) => write!(f, "class {c}"),
            Target::Value(v) => write!(f, "value {v}"),
        }
    }
}

/// How a Gaussian over latents is pushed through the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PushForward {
    MonteCarlo { samples: usize, seed: u64 },
    Probit,
}

impl Default for PushForward {
    fn default() -> Self {
        PushForward::MonteCarlo {
            samples: 100,
            seed: 0,
        }
    }
}

/// Predictive distribution over the observed output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputDistribution {
    Gaussian { mean: f64, variance: f64 },
    /// Class probabilities; index `k` is the probability of `Target::Class(k)`.
    Classes(Vec<f64>),
}

impl OutputDistribution {
    /// Log predictive density (regression) or log probability (classes),
    /// probabilities clamped below at `1e-12`.
    pub fn log_predictive(&self, y: Target) -> Result<f64> {
        match (self, y) {
            (OutputDistribution::Gaussian { mean, variance }, Target::Value(v)) => {
                let r = v - mean;
                Ok(-0.5 * (LN_2PI + variance.ln() + r * r / variance))
            }
            (OutputDistribution::Classes(p), Target::Class(k)) if k < p.len() => {
                Ok(p[k].max(1e-12).ln())
            }
            (_, y) => Err(Error::InvalidLabel {
                family: "predictive distribution",
                label: y.to_string(),
            }),
        }
    }

    /// Argmax class, ties toward the lowest index. `None` for regression.
    pub fn predicted_class(&self) -> Option<usize> {
        match self {
            OutputDistribution::Classes(p) => {
                let mut best = 0;
                for (k, v) in p.iter().enumerate() {
                    if *v > p[best] {
                        best = k;
                    }
                }
                Some(best)
            }
            OutputDistribution::Gaussian { .. } => None,
        }
    }
}

/// Per-point dual coefficients: gradient rows and negated Hessian blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct DualCoefficients {
    /// `N × C`; row `i` is `∇_f log p(y_i | f)` at the network output.
    pub alpha_hat: DMatrix<f64>,
    /// `N` blocks of `C × C`; block `i` is `-∇²_ff log p(y_i | f)`.
    pub beta_hat: Vec<DMatrix<f64>>,
}

impl DualCoefficients {
    pub fn empty(latent_dim: usize) -> Self {
        DualCoefficients {
            alpha_hat: DMatrix::zeros(0, latent_dim),
            beta_hat: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.beta_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta_hat.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.alpha_hat.ncols()
    }

    /// `α̂` stacked point-major, channel-minor into a vector of length `N·C`.
    pub fn stacked_alpha(&self) -> DVector<f64> {
        let c = self.latent_dim();
        DVector::from_fn(self.len() * c, |r, _| self.alpha_hat[(r / c, r % c)])
    }

    /// Restriction to the listed points, in the listed order.
    pub fn select(&self, indices: &[usize]) -> Self {
        DualCoefficients {
            alpha_hat: self.alpha_hat.select_rows(indices),
            beta_hat: indices.iter().map(|&i| self.beta_hat[i].clone()).collect(),
        }
    }
}

fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax(f: &[f64]) -> Vec<f64> {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = f.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(f: &[f64]) -> f64 {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + f.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl Likelihood {
    /// Number of latent outputs the network must produce.
    pub fn latent_dim(&self) -> usize {
        match self {
            Likelihood::Gaussian { .. } | Likelihood::BernoulliLogit => 1,
            Likelihood::CategoricalSoftmax { num_classes } => *num_classes,
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            Likelihood::Gaussian { .. } => "gaussian",
            Likelihood::BernoulliLogit => "bernoulli_logit",
            Likelihood::CategoricalSoftmax { .. } => "categorical_softmax",
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self, Likelihood::Gaussian { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Likelihood::Gaussian { noise_variance } if !(noise_variance > 0.0) => Err(
                Error::Config(format!("noise variance must be positive, got {noise_variance}")),
            ),
            Likelihood::CategoricalSoftmax { num_classes } if num_classes < 2 => Err(
                Error::Config(format!("categorical likelihood needs >= 2 classes, got {num_classes}")),
            ),
            _ => Ok(()),
        }
    }

    fn check(&self, y: Target, f: &[f64]) -> Result<()> {
        if f.len() != self.latent_dim() {
            return Err(Error::DimensionMismatch {
                context: "likelihood latent dimension",
                expected: self.latent_dim(),
                found: f.len(),
            });
        }
        let ok = match (self, y) {
            (Likelihood::Gaussian { .. }, Target::Value(v)) => v.is_finite(),
            (Likelihood::BernoulliLogit, Target::Class(k)) => k < 2,
            (Likelihood::CategoricalSoftmax { num_classes }, Target::Class(k)) => k < *num_classes,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidLabel {
                family: self.family_name(),
                label: y.to_string(),
            })
        }
    }

    pub fn log_prob(&self, y: Target, f: &[f64]) -> Result<f64> {
        self.check(y, f)?;
        Ok(match (*self, y) {
            (Likelihood::Gaussian { noise_variance }, Target::Value(v)) => {
                let r = v - f[0];
                -0.5 * (LN_2PI + noise_variance.ln() + r * r / noise_variance)
            }
            (Likelihood::BernoulliLogit, Target::Class(1)) => -softplus(-f[0]),
            (Likelihood::BernoulliLogit, Target::Class(_)) => -softplus(f[0]),
            (Likelihood::CategoricalSoftmax { .. }, Target::Class(k)) => f[k] - log_sum_exp(f),
            _ => unreachable!("checked above"),
        })
    }

    /// `∇_f log p(y | f)`.
    pub fn grad_f(&self, y: Target, f: &[f64]) -> Result<DVector<f64>> {
        self.check(y, f)?;
        Ok(match (*self, y) {
            (Likelihood::Gaussian { noise_variance }, Target::Value(v)) => {
                DVector::from_element(1, (v - f[0]) / noise_variance)
            }
            (Likelihood::BernoulliLogit, Target::Class(k)) => {
                DVector::from_element(1, k as f64 - sigmoid(f[0]))
            }
            (Likelihood::CategoricalSoftmax { .. }, Target::Class(k)) => {
                let mut g = DVector::from_vec(softmax(f));
                g.neg_mut();
                g[k] += 1.0;
                g
            }
            _ => unreachable!("checked above"),
        })
    }

    /// `-∇²_ff log p(y | f)`, PSD for every family.
    pub fn hess_f(&self, y: Target, f: &[f64]) -> Result<DMatrix<f64>> {
        self.check(y, f)?;
        Ok(match *self {
            Likelihood::Gaussian { noise_variance } => DMatrix::from_element(1, 1, 1.0 / noise_variance),
            Likelihood::BernoulliLogit => {
                let p = sigmoid(f[0]);
                DMatrix::from_element(1, 1, p * (1.0 - p))
            }
            Likelihood::CategoricalSoftmax { .. } => {
                let p = DVector::from_vec(softmax(f));
                let mut h = -(&p * p.transpose());
                for (i, pi) in p.iter().enumerate() {
                    h[(i, i)] += pi;
                }
                h
            }
        })
    }

    /// Output distribution for a point latent value.
    pub fn point_predictive(&self, f: &[f64]) -> OutputDistribution {
        match *self {
            Likelihood::Gaussian { noise_variance } => OutputDistribution::Gaussian {
                mean: f[0],
                variance: noise_variance,
            },
            Likelihood::BernoulliLogit => {
                let p = sigmoid(f[0]);
                OutputDistribution::Classes(vec![1.0 - p, p])
            }
            Likelihood::CategoricalSoftmax { .. } => OutputDistribution::Classes(softmax(f)),
        }
    }

    /// `E_{N(f; mean, cov)}[p(y | f)]`.
    ///
    /// `stream` selects an independent Monte-Carlo stream under the same seed
    /// so batched predictions stay deterministic per point.
    pub fn push_forward(
        &self,
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        method: PushForward,
        stream: u64,
    ) -> Result<OutputDistribution> {
        let c = self.latent_dim();
        if mean.len() != c || cov.nrows() != c || cov.ncols() != c {
            return Err(Error::DimensionMismatch {
                context: "push_forward",
                expected: c,
                found: mean.len(),
            });
        }
        if let Likelihood::Gaussian { noise_variance } = *self {
            return Ok(OutputDistribution::Gaussian {
                mean: mean[0],
                variance: cov[(0, 0)].max(0.0) + noise_variance,
            });
        }
        match method {
            PushForward::Probit => self.probit(mean, cov),
            PushForward::MonteCarlo { samples, seed } => {
                if samples == 0 {
                    return Err(Error::Config("Monte-Carlo pushforward needs >= 1 sample".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream);
                Ok(self.monte_carlo(mean, cov, samples, &mut rng))
            }
        }
    }

    fn probit(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<OutputDistribution> {
        let probit = |m: f64, v: f64| sigmoid(m / (1.0 + std::f64::consts::PI * v.max(0.0) / 8.0).sqrt());
        match *self {
            Likelihood::BernoulliLogit => {
                let p = probit(mean[0], cov[(0, 0)]);
                Ok(OutputDistribution::Classes(vec![1.0 - p, p]))
            }
            Likelihood::CategoricalSoftmax { num_classes: 2 } => {
                let d = mean[1] - mean[0];
                let v = cov[(0, 0)] + cov[(1, 1)] - 2.0 * cov[(0, 1)];
                let p = probit(d, v);
                Ok(OutputDistribution::Classes(vec![1.0 - p, p]))
            }
            _ => Err(Error::UnsupportedMethod {
                method: "probit",
                family: self.family_name(),
            }),
        }
    }

    fn monte_carlo(
        &self,
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        samples: usize,
        rng: &mut ChaCha8Rng,
    ) -> OutputDistribution {
        let c = self.latent_dim();
        match self {
            Likelihood::BernoulliLogit => {
                let sd = cov[(0, 0)].max(0.0).sqrt();
                let mut acc = 0.0;
                for _ in 0..samples {
                    let eps: f64 = StandardNormal.sample(rng);
                    acc += sigmoid(mean[0] + sd * eps);
                }
                let p = acc / samples as f64;
                OutputDistribution::Classes(vec![1.0 - p, p])
            }
            _ => {
                let factor = psd_factor(cov);
                let mut acc = vec![0.0; c];
                let mut f = vec![0.0; c];
                let mut eps = DVector::zeros(c);
                for _ in 0..samples {
                    for e in eps.iter_mut() {
                        *e = StandardNormal.sample(rng);
                    }
                    let shift = &factor * &eps;
                    for k in 0..c {
                        f[k] = mean[k] + shift[k];
                    }
                    for (a, p) in acc.iter_mut().zip(softmax(&f)) {
                        *a += p;
                    }
                }
                OutputDistribution::Classes(acc.into_iter().map(|a| a / samples as f64).collect())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const CAT3: Likelihood = Likelihood::CategoricalSoftmax { num_classes: 3 };

    #[test]
    fn log_prob_examples() {
        let g = Likelihood::Gaussian { noise_variance: 1.0 };
        assert_relative_eq!(g.log_prob(Target::Value(0.0), &[0.0]).unwrap(), -0.918_938_533_204_672_7, epsilon = 1e-12);
        assert_relative_eq!(
            Likelihood::BernoulliLogit.log_prob(Target::Class(1), &[0.0]).unwrap(),
            -std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert_relative_eq!(CAT3.log_prob(Target::Class(2), &[0.0; 3]).unwrap(), -(3f64.ln()), epsilon = 1e-15);
    }

    #[test]
    fn grad_examples() {
        let g = Likelihood::Gaussian { noise_variance: 2.0 };
        assert_eq!(g.grad_f(Target::Value(3.0), &[1.0]).unwrap()[0], 1.0);
        assert_eq!(Likelihood::BernoulliLogit.grad_f(Target::Class(1), &[0.0]).unwrap()[0], 0.5);
        let c = CAT3.grad_f(Target::Class(0), &[0.0; 3]).unwrap();
        assert_relative_eq!(c, DVector::from_vec(vec![2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0]), epsilon = 1e-15);
    }

    #[test]
    fn hess_examples() {
        let g = Likelihood::Gaussian { noise_variance: 4.0 };
        assert_eq!(g.hess_f(Target::Value(7.0), &[-3.0]).unwrap()[(0, 0)], 0.25);
        assert_eq!(Likelihood::BernoulliLogit.hess_f(Target::Class(0), &[0.0]).unwrap()[(0, 0)], 0.25);
        let c2 = Likelihood::CategoricalSoftmax { num_classes: 2 };
        assert_eq!(
            c2.hess_f(Target::Class(0), &[0.0, 0.0]).unwrap(),
            DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25])
        );
    }

    #[test]
    fn invalid_labels() {
        assert!(matches!(CAT3.log_prob(Target::Class(3), &[0.0; 3]), Err(Error::InvalidLabel { .. })));
        assert!(matches!(Likelihood::BernoulliLogit.grad_f(Target::Class(2), &[0.0]), Err(Error::InvalidLabel { .. })));
        let g = Likelihood::Gaussian { noise_variance: 1.0 };
        assert!(matches!(g.hess_f(Target::Class(0), &[0.0]), Err(Error::InvalidLabel { .. })));
        assert!(matches!(CAT3.log_prob(Target::Class(0), &[0.0; 2]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn degenerate_pushforward_is_exact() {
        let m = DVector::zeros(1);
        let v = DMatrix::zeros(1, 1);
        let mc = PushForward::MonteCarlo { samples: 10, seed: 3 };
        for method in [mc, PushForward::Probit] {
            match Likelihood::BernoulliLogit.push_forward(&m, &v, method, 0).unwrap() {
                OutputDistribution::Classes(p) => assert_eq!(p[1], 0.5),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn gaussian_pushforward_adds_noise() {
        let g = Likelihood::Gaussian { noise_variance: 1.0 };
        let out = g
            .push_forward(&DVector::from_element(1, 2.0), &DMatrix::from_element(1, 1, 3.0), PushForward::Probit, 0)
            .unwrap();
        assert_eq!(out, OutputDistribution::Gaussian { mean: 2.0, variance: 4.0 });
    }

    #[test]
    fn probit_rejects_multiclass() {
        let err = CAT3
            .push_forward(&DVector::zeros(3), &DMatrix::zeros(3, 3), PushForward::Probit, 0)
            .unwrap_err();
        assert!(matches!(err, Error::UnsupportedMethod { .. }));
    }

    /// Composite Simpson over ±12 standard deviations.
    fn quadrature_sigmoid(mean: f64, var: f64) -> f64 {
        let sd = var.sqrt();
        let (a, b, n) = (mean - 12.0 * sd, mean + 12.0 * sd, 20_000usize);
        let h = (b - a) / n as f64;
        let g = |f: f64| {
            let z = (f - mean) / sd;
            sigmoid(f) * (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
        };
        let mut s = g(a) + g(b);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * g(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn monte_carlo_matches_quadrature() {
        let oracle = quadrature_sigmoid(1.0, 2.0);
        let out = Likelihood::BernoulliLogit
            .push_forward(
                &DVector::from_element(1, 1.0),
                &DMatrix::from_element(1, 1, 2.0),
                PushForward::MonteCarlo { samples: 100_000, seed: 11 },
                0,
            )
            .unwrap();
        let OutputDistribution::Classes(p) = out else { panic!() };
        assert!((p[1] - oracle).abs() < 0.01, "mc {} vs quadrature {oracle}", p[1]);
        // probit is an approximation of the same integral
        let OutputDistribution::Classes(q) = Likelihood::BernoulliLogit
            .push_forward(&DVector::from_element(1, 1.0), &DMatrix::from_element(1, 1, 2.0), PushForward::Probit, 0)
            .unwrap()
        else {
            panic!()
        };
        assert!((q[1] - oracle).abs() < 0.02);
    }

    fn case() -> impl Strategy<Value = (Likelihood, Target, Vec<f64>)> {
        prop_oneof![
            (0.1..5.0f64, -3.0..3.0f64, -3.0..3.0f64)
                .prop_map(|(s, y, f)| (Likelihood::Gaussian { noise_variance: s }, Target::Value(y), vec![f])),
            (0usize..2, -6.0..6.0f64).prop_map(|(k, f)| (Likelihood::BernoulliLogit, Target::Class(k), vec![f])),
            (2usize..5)
                .prop_flat_map(|c| (Just(c), 0..c, proptest::collection::vec(-4.0..4.0f64, c)))
                .prop_map(|(c, k, f)| (Likelihood::CategoricalSoftmax { num_classes: c }, Target::Class(k), f)),
        ]
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-3)
    }

    proptest! {
        #[test]
        fn derivatives_match_finite_differences((lik, y, f) in case()) {
            let h = 1e-5;
            let grad = lik.grad_f(y, &f).unwrap();
            let hess = lik.hess_f(y, &f).unwrap();
            for i in 0..f.len() {
                let mut fp = f.clone();
                let mut fm = f.clone();
                fp[i] += h;
                fm[i] -= h;
                let fd = (lik.log_prob(y, &fp).unwrap() - lik.log_prob(y, &fm).unwrap()) / (2.0 * h);
                prop_assert!(close(grad[i], fd, 1e-6), "grad {} vs fd {}", grad[i], fd);
                let gp = lik.grad_f(y, &fp).unwrap();
                let gm = lik.grad_f(y, &fm).unwrap();
                for j in 0..f.len() {
                    let fd = -(gp[j] - gm[j]) / (2.0 * h);
                    prop_assert!(close(hess[(j, i)], fd, 1e-6), "hess {} vs fd {}", hess[(j, i)], fd);
                }
            }
        }

        #[test]
        fn negated_hessian_is_symmetric_psd((lik, y, f) in case()) {
            let h = lik.hess_f(y, &f).unwrap();
            prop_assert_eq!(&h, &h.transpose());
            let min = h.clone().symmetric_eigenvalues().min();
            prop_assert!(min >= -1e-12);
            if let Likelihood::CategoricalSoftmax { .. } = lik {
                for r in 0..h.nrows() {
                    prop_assert!(h.row(r).sum().abs() < 1e-12);
                }
            }
        }

        #[test]
        fn mc_probabilities_stay_in_simplex((lik, _y, f) in case(), var in 0.0..4.0f64, seed in 0u64..50) {
            prop_assume!(lik.is_classification());
            let c = f.len();
            let mean = DVector::from_vec(f);
            let cov = DMatrix::from_fn(c, c, |i, j| if i == j { var } else { 0.3 * var });
            let out = lik.push_forward(&mean, &cov, PushForward::MonteCarlo { samples: 64, seed }, 0).unwrap();
            let OutputDistribution::Classes(p) = out else { panic!() };
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
