//! Post-hoc selection of the prior precision (and Gaussian noise) on a
//! validation set.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{jacobians_for, InputSet, JacobianCache};
use crate::likelihood::{Likelihood, PushForward};
use crate::metrics::nlpd;
use crate::nn::{mlp_forward, MlpWeights};
use crate::posterior::{FunctionSpaceGp, GgnSpectrum, PredictiveDistribution, SfrState};

/// Cache key under which validation Jacobians are stored.
pub const VALID_CACHE_ID: &str = "valid";

const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMetric {
    #[default]
    Nlpd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneGrid {
    values: Vec<f64>,
    #[serde(default)]
    pub metric: TuneMetric,
}

impl TuneGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("tuning grid is empty".into()));
        }
        if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("tuning grid values must be positive and finite: {values:?}")));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("tuning grid must be strictly increasing: {values:?}")));
        }
        Ok(TuneGrid {
            values,
            metric: TuneMetric::Nlpd,
        })
    }

    /// `n` points spaced evenly in `log10` between `lo` and `hi` inclusive.
    pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n == 1 {
            return Self::new(vec![lo]);
        }
        if !(lo > 0.0 && hi > lo) || n == 0 {
            return Err(Error::Config(format!("invalid log grid [{lo}, {hi}] with {n} points")));
        }
        let (a, b) = (lo.log10(), hi.log10());
        let mut values: Vec<f64> = (0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)).collect();
        values[0] = lo;
        values[n - 1] = hi;
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Default grid for Gaussian noise variances.
    pub fn default_noise() -> Self {
        Self::log_spaced(1e-4, 1e1, 16).expect("static grid")
    }
}

impl Default for TuneGrid {
    /// 20 points log-spaced over `[1e-4, 1e4]`.
    fn default() -> Self {
        Self::log_spaced(1e-4, 1e4, 20).expect("static grid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorFamily {
    Bnn,
    Glm,
    GpSubset,
    Sfr,
}

impl PredictorFamily {
    pub fn name(self) -> &'static str {
        match self {
            PredictorFamily::Bnn => "bnn",
            PredictorFamily::Glm => "glm",
            PredictorFamily::GpSubset => "gp_subset",
            PredictorFamily::Sfr => "sfr",
        }
    }
}

impl fmt::Display for PredictorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub value: f64,
    /// Validation NLPD; `None` when the evaluation failed or was not finite.
    pub nlpd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best: f64,
    pub table: Vec<TuneRow>,
}

impl TuneOutcome {
    pub fn best_nlpd(&self) -> Option<f64> {
        self.table.iter().find(|r| r.value == self.best).and_then(|r| r.nlpd)
    }
}

/// Argmin over the grid. Non-finite scores count as `+∞`; scores within
/// 1e-12 of the minimum resolve to the largest grid value.
pub fn select_best(values: &[f64], scores: &[f64]) -> Result<TuneOutcome> {
    if values.len() != scores.len() || values.is_empty() {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: scores.len(),
        });
    }
    let cleaned: Vec<f64> = scores.iter().map(|s| if s.is_finite() { *s } else { f64::INFINITY }).collect();
    let min = cleaned.iter().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::Config("no grid value produced a finite validation NLPD".into()));
    }
    let best = values
        .iter()
        .zip(&cleaned)
        .filter(|(_, s)| **s <= min + TIE_TOLERANCE)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(TuneOutcome {
        best,
        table: values
            .iter()
            .zip(&cleaned)
            .map(|(v, s)| TuneRow {
                value: *v,
                nlpd: s.is_finite().then_some(*s),
            })
            .collect(),
    })
}

/// Evaluates `score` at every grid value and selects the best. Errors at a
/// single grid value are logged and scored as `+∞`.
pub fn tune_with(grid: &TuneGrid, mut score: impl FnMut(f64) -> Result<f64>) -> Result<TuneOutcome> {
    let scores: Vec<f64> = grid
        .values()
        .iter()
        .map(|&v| {
            score(v).unwrap_or_else(|e| {
                log::warn!("tuning value {v:e} failed: {e}");
                f64::INFINITY
            })
        })
        .collect();
    select_best(grid.values(), &scores)
}

/// A fitted predictor whose prior precision can be changed without new
/// network passes (except BNN sampling, which needs one pass per sample).
#[derive(Debug, Clone, Copy)]
pub enum FittedPredictor<'a> {
    Bnn { spectrum: &'a GgnSpectrum, samples: usize, seed: u64 },
    Glm { spectrum: &'a GgnSpectrum },
    GpSubset { gp: &'a FunctionSpaceGp },
    Sfr { state: &'a SfrState },
}

impl FittedPredictor<'_> {
    pub fn family(&self) -> PredictorFamily {
        match self {
            FittedPredictor::Bnn { .. } => PredictorFamily::Bnn,
            FittedPredictor::Glm { .. } => PredictorFamily::Glm,
            FittedPredictor::GpSubset { .. } => PredictorFamily::GpSubset,
            FittedPredictor::Sfr { .. } => PredictorFamily::Sfr,
        }
    }

    fn weights(&self) -> &MlpWeights {
        match self {
            FittedPredictor::Bnn { spectrum, .. } | FittedPredictor::Glm { spectrum } => &spectrum.w_star,
            FittedPredictor::GpSubset { gp } => gp.kernel().weights(),
            FittedPredictor::Sfr { state } => state.kernel().weights(),
        }
    }
}

/// Selects the prior precision with the lowest validation NLPD.
///
/// Validation Jacobians are taken from `cache` under [`VALID_CACHE_ID`]
/// when one is supplied, so repeated tuning runs share them.
pub fn tune_delta(
    fitted: FittedPredictor<'_>,
    valid: &Dataset,
    lik: &Likelihood,
    grid: &TuneGrid,
    method: PushForward,
    cache: Option<&JacobianCache>,
) -> Result<TuneOutcome> {
    if valid.is_empty() {
        return Err(Error::EmptySplit { split: "valid", n: 0 });
    }
    let labels = valid.targets_vec();
    let score = |preds: Vec<PredictiveDistribution>| -> Result<f64> {
        let outputs: Vec<_> = preds.into_iter().map(|p| p.output).collect();
        nlpd(&outputs, &labels)
    };
    let jacobians = || jacobians_for(fitted.weights(), InputSet::named(VALID_CACHE_ID, &valid.x), cache);
    match fitted {
        FittedPredictor::Bnn { spectrum, samples, seed } => {
            tune_with(grid, |d| score(spectrum.predict_bnn(&valid.x, d, lik, samples, seed)?))
        }
        FittedPredictor::Glm { spectrum } => {
            let projection = spectrum.project(&valid.x)?;
            tune_with(grid, |d| score(projection.predict(d, lik, method)?))
        }
        FittedPredictor::GpSubset { gp } => {
            let j = jacobians()?;
            let f: DMatrix<f64> = mlp_forward(gp.kernel().weights(), &valid.x)?;
            let projection = gp.project(&j, Some(&f))?;
            tune_with(grid, |d| score(projection.predict(d, lik, method)?))
        }
        FittedPredictor::Sfr { state } => {
            let j = jacobians()?;
            let projection = state.project(&j)?;
            tune_with(grid, |d| score(projection.predict(d, lik, method)?))
        }
    }
}

/// Selects the Gaussian noise variance for an SFR posterior by refitting the
/// sparse dual parameters at every grid value.
pub fn tune_noise_sfr(
    state: &SfrState,
    train: &Dataset,
    valid: &Dataset,
    grid: &TuneGrid,
    method: PushForward,
) -> Result<TuneOutcome> {
    if train.num_classes != 0 {
        return Err(Error::Config("noise tuning applies to regression data only".into()));
    }
    if valid.is_empty() {
        return Err(Error::EmptySplit { split: "valid", n: 0 });
    }
    let labels = valid.targets_vec();
    let j = state.kernel().weights().jacobian_stack(&valid.x)?;
    tune_with(grid, |noise_variance| {
        let lik = Likelihood::Gaussian { noise_variance };
        let fitted = SfrState::fit(state.kernel(), train, &lik, state.inducing_inputs())?;
        let outputs: Vec<_> = fitted.predict_stack(&j, &lik, method)?.into_iter().map(|p| p.output).collect();
        nlpd(&outputs, &labels)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::NtkKernel;
    use crate::nn::{mlp_init, MlpArchitecture};
    use crate::posterior::{compute_duals, select_inducing, MeanSource};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_grid_shape() {
        let g = TuneGrid::default();
        assert_eq!(g.values().len(), 20);
        assert_eq!(g.values()[0], 1e-4);
        assert_eq!(g.values()[19], 1e4);
        assert!(g.values().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn grid_validation() {
        assert!(TuneGrid::new(vec![]).is_err());
        assert!(TuneGrid::new(vec![1.0, 1.0]).is_err());
        assert!(TuneGrid::new(vec![0.0, 1.0]).is_err());
        assert_eq!(TuneGrid::log_spaced(3.0, 3.0, 1).unwrap().values(), &[3.0]);
    }

    #[test]
    fn argmin_rules() {
        let single = select_best(&[0.5], &[2.0]).unwrap();
        assert_eq!(single.best, 0.5);
        let tie = select_best(&[0.1, 1.0, 10.0], &[0.3, 0.2, 0.2 + 5e-13]).unwrap();
        assert_eq!(tie.best, 10.0);
        let skip = select_best(&[0.1, 1.0, 10.0], &[f64::NAN, 0.4, f64::INFINITY]).unwrap();
        assert_eq!(skip.best, 1.0);
        assert_eq!(skip.table[0].nlpd, None);
        assert!(select_best(&[1.0], &[f64::NAN]).is_err());
    }

    fn problem() -> (MlpWeights, Dataset, Dataset, Likelihood) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = mlp_init(&MlpArchitecture::new(2, vec![8], 1), 1);
        let mut make = |n: usize| {
            let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
            let y = (0..n).map(|i| usize::from(x[(i, 0)] + 0.3 * x[(i, 1)] > 0.0)).collect();
            Dataset::classification("t", x, y, 2)
        };
        let (train, valid) = (make(60), make(30));
        (w, train, valid, Likelihood::BernoulliLogit)
    }

    #[test]
    fn sfr_tuning_reuses_validation_jacobians() {
        let (w, train, valid, lik) = problem();
        let z = select_inducing(&train.x, 12, 0).unwrap().z;
        let kernel = NtkKernel::new(w.clone(), 1e-2).unwrap();
        let state = SfrState::fit(&kernel, &train, &lik, &z).unwrap();
        let cache = JacobianCache::new(&w);
        let grid = TuneGrid::default();
        let a = tune_delta(FittedPredictor::Sfr { state: &state }, &valid, &lik, &grid, PushForward::Probit, Some(&cache)).unwrap();
        assert_eq!(cache.computed(), 1);
        let b = tune_delta(FittedPredictor::Sfr { state: &state }, &valid, &lik, &grid, PushForward::Probit, Some(&cache)).unwrap();
        assert_eq!(cache.computed(), 1);
        assert_eq!(cache.hits(), 1);
        assert_eq!(a, b);
        let train_score = a.table.iter().find(|r| r.value == 1e-2);
        assert!(train_score.is_none() || a.best_nlpd().unwrap() <= train_score.unwrap().nlpd.unwrap());
    }

    #[test]
    fn tuned_value_dominates_every_grid_point() {
        let (w, train, valid, lik) = problem();
        let subset = train.subset(&(0..15).collect::<Vec<_>>());
        let kernel = NtkKernel::new(w.clone(), 1e-2).unwrap();
        let duals = compute_duals(&w, &subset, &lik).unwrap();
        let gp = FunctionSpaceGp::fit(&kernel, InputSet::anonymous(&subset.x), &duals, None, MeanSource::Network).unwrap();
        let grid = TuneGrid::new(vec![1e-2, 1.0, 100.0]).unwrap();
        let method = PushForward::MonteCarlo { samples: 50, seed: 2 };
        let out = tune_delta(FittedPredictor::GpSubset { gp: &gp }, &valid, &lik, &grid, method, None).unwrap();
        let best = out.best_nlpd().unwrap();
        assert!(out.table.iter().all(|r| best <= r.nlpd.unwrap()));
        let spectrum = GgnSpectrum::fit(&w, &train, &lik).unwrap();
        let glm = tune_delta(FittedPredictor::Glm { spectrum: &spectrum }, &valid, &lik, &grid, method, None).unwrap();
        assert!(grid.values().contains(&glm.best));
        let bnn = FittedPredictor::Bnn { spectrum: &spectrum, samples: 20, seed: 0 };
        assert_eq!(tune_delta(bnn, &valid, &lik, &grid, method, None).unwrap(), tune_delta(bnn, &valid, &lik, &grid, method, None).unwrap());
    }

    #[test]
    fn noise_tuning_prefers_the_generating_noise_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut make = |n: usize| {
            let x = DMatrix::<f64>::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
            let y = (0..n).map(|i| (2.0 * x[(i, 0)]).sin() + 0.5 * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            Dataset::regression("r", x, y)
        };
        let (train, valid) = (make(150), make(300));
        let lik = Likelihood::Gaussian { noise_variance: 0.25 };
        let cfg = crate::nn::TrainConfig {
            learning_rate: 1e-2,
            batch_size: 150,
            max_steps: 3000,
            prior_precision: 1.0,
            ..Default::default()
        };
        let (w, _) = crate::nn::train_map(&MlpArchitecture::new(1, vec![10], 1), &train, &valid, &lik, &cfg).unwrap();
        let kernel = NtkKernel::new(w, cfg.prior_precision).unwrap();
        let state = SfrState::fit(&kernel, &train, &lik, &select_inducing(&train.x, 40, 0).unwrap().z).unwrap();
        let out = tune_noise_sfr(&state, &train, &valid, &TuneGrid::default_noise(), PushForward::default()).unwrap();
        assert!(out.best > 0.05 && out.best < 1.0, "selected {}", out.best);
    }
}
