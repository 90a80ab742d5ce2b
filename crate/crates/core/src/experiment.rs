//! Benchmark orchestration: per-seed training, method evaluation with and
//! without prior-precision tuning, inducing-point sweeps and the 1-D
//! regression demo.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_csv, split_standardize, CsvSchema, Dataset, Splits};
use crate::error::{Error, Result};
use crate::kernel::{InputSet, JacobianCache, NtkKernel};
use crate::likelihood::{Likelihood, OutputDistribution, PushForward};
use crate::metrics::{accuracy, nlpd};
use crate::nn::{mlp_forward, train_map, Activation, MlpArchitecture, MlpWeights, TrainConfig, TrainTrace};
use crate::posterior::{
    compute_duals, ggn_fit, inducing_count, predict_bnn, predict_glm, predict_map, select_inducing, FunctionSpaceGp,
    GgnPosterior, GgnSpectrum, Inducing, MeanSource, PredictiveDistribution, SfrState,
};
use crate::tuning::{tune_delta, FittedPredictor, TuneGrid, TuneOutcome, TuneRow};

const TEST_CACHE_ID: &str = "test";
const TRAIN_CACHE_ID: &str = "train";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NnMap,
    Bnn,
    Glm,
    GpSubset,
    Sfr,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::NnMap, Method::Bnn, Method::Glm, Method::GpSubset, Method::Sfr];

    pub fn name(self) -> &'static str {
        match self {
            Method::NnMap => "nn_map",
            Method::Bnn => "bnn",
            Method::Glm => "glm",
            Method::GpSubset => "gp_subset",
            Method::Sfr => "sfr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    /// Inference at the training prior precision.
    None,
    /// Inference at the prior precision selected on the validation set.
    Tuned,
}

impl DeltaMode {
    pub fn name(self) -> &'static str {
        match self {
            DeltaMode::None => "none",
            DeltaMode::Tuned => "tuned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// CSV file with the full dataset.
    pub dataset: PathBuf,
    /// Name used in outputs; the file stem when absent.
    pub name: Option<String>,
    pub csv: CsvSchema,
    pub split_fractions: [f64; 3],
    pub seeds: Vec<u64>,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub train: TrainConfig,
    /// Inducing points `M` as a fraction of the training set size.
    pub inducing_fraction: f64,
    pub methods: Vec<Method>,
    pub tune_delta: bool,
    /// Tunes the prior precision per inducing fraction in the sweep. When
    /// off, every fraction uses the training prior precision.
    pub sweep_tune_delta: bool,
    pub pushforward: PushForward,
    /// Weight samples for the BNN predictive.
    pub bnn_samples: usize,
    /// Prior-precision grid; the default grid when absent.
    pub delta_grid: Option<Vec<f64>>,
    /// Gaussian noise variance for regression data.
    pub noise_variance: f64,
    /// Records wall-clock seconds per run. Disable for byte-reproducible
    /// output.
    pub record_timing: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: PathBuf::new(),
            name: None,
            csv: CsvSchema::default(),
            split_fractions: [0.70, 0.15, 0.15],
            seeds: (0..5).collect(),
            hidden_widths: vec![50, 50],
            activation: Activation::Tanh,
            train: TrainConfig::default(),
            inducing_fraction: 0.20,
            methods: Method::ALL.to_vec(),
            tune_delta: true,
            sweep_tune_delta: false,
            pushforward: PushForward::default(),
            bnn_samples: 100,
            delta_grid: None,
            noise_variance: 1.0,
            record_timing: true,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.split_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split_fractions.iter().any(|f| *f < 0.0) {
            return Err(Error::Config(format!("split fractions {:?} must sum to 1", self.split_fractions)));
        }
        if !(self.inducing_fraction > 0.0 && self.inducing_fraction <= 1.0) {
            return Err(Error::Config(format!("inducing fraction {} must lie in (0, 1]", self.inducing_fraction)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.bnn_samples == 0 {
            return Err(Error::Config("bnn_samples must be positive".into()));
        }
        if !(self.noise_variance > 0.0) {
            return Err(Error::Config("noise_variance must be positive".into()));
        }
        self.train.validate()?;
        self.grid()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<TuneGrid> {
        match &self.delta_grid {
            Some(values) => TuneGrid::new(values.clone()),
            None => Ok(TuneGrid::default()),
        }
    }

    pub fn dataset_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            self.dataset
                .file_stem()
                .map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned())
        })
    }

    pub fn architecture(&self, data: &Dataset) -> MlpArchitecture {
        let output_dim = match data.default_likelihood(self.noise_variance) {
            Likelihood::CategoricalSoftmax { num_classes } => num_classes,
            _ => 1,
        };
        let mut arch = MlpArchitecture::new(data.input_dim(), self.hidden_widths.clone(), output_dim);
        arch.activation = self.activation;
        arch
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut data = load_csv(&self.dataset, &self.csv)?;
        data.name = self.dataset_name();
        Ok(data)
    }
}

/// One trained network and everything derived from its seed.
#[derive(Debug)]
pub struct SeedContext {
    pub seed: u64,
    pub splits: Splits,
    pub likelihood: Likelihood,
    pub weights: MlpWeights,
    pub trace: TrainTrace,
    pub train_seconds: f64,
    /// Inducing inputs at the configured fraction; the GP subset uses the same
    /// rows.
    pub inducing: Inducing,
    pub cache: JacobianCache,
}

/// The experiment seed drives the split, initialization, minibatch order and
/// inducing selection.
pub fn train_seed(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<SeedContext> {
    let splits = split_standardize(data, cfg.split_fractions, seed)?;
    let likelihood = data.default_likelihood(cfg.noise_variance);
    let arch = cfg.architecture(data);
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let start = Instant::now();
    let (weights, trace) = train_map(&arch, &splits.train, &splits.valid, &likelihood, &train_cfg)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let m = inducing_count(splits.train.len(), cfg.inducing_fraction);
    let inducing = select_inducing(&splits.train.x, m, seed)?;
    let cache = JacobianCache::new(&weights);
    log::info!(
        "{} seed {seed}: trained {} steps (best {}) valid NLPD {:.4}",
        data.name,
        trace.records.last().map_or(0, |r| r.step),
        trace.best_step,
        trace.best_valid_nlpd()
    );
    Ok(SeedContext {
        seed,
        splits,
        likelihood,
        weights,
        trace,
        train_seconds,
        inducing,
        cache,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub method: Method,
    pub seed: u64,
    pub delta_mode: DeltaMode,
    pub nlpd: Option<f64>,
    pub acc: Option<f64>,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    /// Prior precision used at inference.
    pub delta: Option<f64>,
    pub train_delta: f64,
    pub seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tune_table: Option<Vec<TuneRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dataset: String,
    pub method: Method,
    pub delta_mode: DeltaMode,
    pub num_seeds: usize,
    pub nlpd_mean: f64,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub nlpd_std: Option<f64>,
    pub acc_mean: Option<f64>,
    pub acc_std: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub seed: u64,
    pub steps: usize,
    pub best_step: usize,
    pub best_valid_nlpd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "C")]
    pub c: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config_hash: String,
    pub dataset: DatasetSummary,
    pub config: ExperimentConfig,
    pub training: Vec<TrainingSummary>,
    pub per_run: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// Mean and sample standard deviation per `(method, δ-mode)`.
pub fn aggregate(records: &[RunRecord]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(String, Method, DeltaMode), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.dataset.clone(), r.method, r.delta_mode)).or_default().push(r);
    }
    groups
        .into_iter()
        .filter_map(|((dataset, method, delta_mode), runs)| {
            let ok: Vec<&RunRecord> = runs.iter().copied().filter(|r| r.nlpd.is_some()).collect();
            let failures = runs.len() - ok.len();
            if ok.is_empty() {
                return None;
            }
            let nlpds: Vec<f64> = ok.iter().filter_map(|r| r.nlpd).collect();
            let accs: Vec<f64> = ok.iter().filter_map(|r| r.acc).collect();
            let (nlpd_mean, nlpd_std) = mean_std(&nlpds);
            let (acc_mean, acc_std) = if accs.len() == ok.len() {
                let (m, s) = mean_std(&accs);
                (Some(m), s)
            } else {
                (None, None)
            };
            Some(Aggregate {
                dataset,
                method,
                delta_mode,
                num_seeds: ok.len(),
                nlpd_mean,
                nlpd_std,
                acc_mean,
                acc_std,
                failures,
            })
        })
        .collect()
}

fn score(preds: &[PredictiveDistribution], data: &Dataset) -> Result<(f64, Option<f64>)> {
    let outputs: Vec<OutputDistribution> = preds.iter().map(|p| p.output.clone()).collect();
    let labels = data.targets_vec();
    Ok((nlpd(&outputs, &labels)?, accuracy(&outputs, &labels)?))
}

struct Evaluation {
    mode: DeltaMode,
    delta: Option<f64>,
    preds: Vec<PredictiveDistribution>,
    table: Option<TuneOutcome>,
}

/// Shared per-seed state for the weight-space methods so the `P × P`
/// factorization at the training precision is done once.
#[derive(Default)]
struct WeightSpace {
    dense: Option<GgnPosterior>,
    spectrum: Option<GgnSpectrum>,
}

impl WeightSpace {
    fn dense(&mut self, ctx: &SeedContext, delta: f64) -> Result<GgnPosterior> {
        if self.dense.is_none() {
            self.dense = Some(ggn_fit(&ctx.weights, &ctx.splits.train, &ctx.likelihood, delta)?);
        }
        let post = self.dense.as_ref().expect("fitted");
        if post.prior_precision() == delta {
            Ok(post.clone())
        } else {
            post.with_prior_precision(delta)
        }
    }

    fn spectrum(&mut self, ctx: &SeedContext) -> Result<&GgnSpectrum> {
        if self.spectrum.is_none() {
            self.spectrum = Some(GgnSpectrum::fit(&ctx.weights, &ctx.splits.train, &ctx.likelihood)?);
        }
        Ok(self.spectrum.as_ref().expect("fitted"))
    }
}

fn evaluate_method(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    method: Method,
    weight_space: &mut WeightSpace,
) -> Result<Vec<Evaluation>> {
    let lik = &ctx.likelihood;
    let (train, valid, test) = (&ctx.splits.train, &ctx.splits.valid, &ctx.splits.test);
    let delta0 = cfg.train.prior_precision;
    let pf = cfg.pushforward;
    let grid = cfg.grid()?;
    let bnn_seed = ctx.seed;
    let mut out = Vec::new();
    match method {
        Method::NnMap => {
            let preds = predict_map(&ctx.weights, &test.x, lik)?;
            for mode in modes(cfg) {
                out.push(Evaluation {
                    mode,
                    delta: None,
                    preds: preds.clone(),
                    table: None,
                });
            }
        }
        Method::Glm | Method::Bnn => {
            let predict = |post: &GgnPosterior| -> Result<Vec<PredictiveDistribution>> {
                match method {
                    Method::Glm => predict_glm(post, &test.x, lik, pf),
                    _ => predict_bnn(post, &test.x, lik, cfg.bnn_samples, bnn_seed),
                }
            };
            out.push(Evaluation {
                mode: DeltaMode::None,
                delta: Some(delta0),
                preds: predict(&weight_space.dense(ctx, delta0)?)?,
                table: None,
            });
            if cfg.tune_delta {
                let spectrum = weight_space.spectrum(ctx)?;
                let fitted = match method {
                    Method::Glm => FittedPredictor::Glm { spectrum },
                    _ => FittedPredictor::Bnn {
                        spectrum,
                        samples: cfg.bnn_samples,
                        seed: bnn_seed,
                    },
                };
                let outcome = tune_delta(fitted, valid, lik, &grid, pf, Some(&ctx.cache))?;
                let post = weight_space.dense(ctx, outcome.best)?;
                out.push(Evaluation {
                    mode: DeltaMode::Tuned,
                    delta: Some(outcome.best),
                    preds: predict(&post)?,
                    table: Some(outcome),
                });
            }
        }
        Method::GpSubset => {
            let subset = train.subset(&ctx.inducing.indices);
            let kernel = NtkKernel::new(ctx.weights.clone(), delta0)?;
            let duals = compute_duals(&ctx.weights, &subset, lik)?;
            let gp = FunctionSpaceGp::fit(&kernel, InputSet::anonymous(&subset.x), &duals, None, MeanSource::Network)?;
            let j = ctx.cache.get_or_compute(&ctx.weights, TEST_CACHE_ID, &test.x)?;
            let f = mlp_forward(&ctx.weights, &test.x)?;
            out.push(Evaluation {
                mode: DeltaMode::None,
                delta: Some(delta0),
                preds: gp.predict_stack(&j, Some(&f), lik, pf)?,
                table: None,
            });
            if cfg.tune_delta {
                let outcome = tune_delta(FittedPredictor::GpSubset { gp: &gp }, valid, lik, &grid, pf, Some(&ctx.cache))?;
                out.push(Evaluation {
                    mode: DeltaMode::Tuned,
                    delta: Some(outcome.best),
                    preds: gp.with_prior_precision(outcome.best)?.predict_stack(&j, Some(&f), lik, pf)?,
                    table: Some(outcome),
                });
            }
        }
        Method::Sfr => {
            let kernel = NtkKernel::new(ctx.weights.clone(), delta0)?;
            let state = SfrState::fit(&kernel, train, lik, &ctx.inducing.z)?;
            let j = ctx.cache.get_or_compute(&ctx.weights, TEST_CACHE_ID, &test.x)?;
            out.push(Evaluation {
                mode: DeltaMode::None,
                delta: Some(delta0),
                preds: state.predict_stack(&j, lik, pf)?,
                table: None,
            });
            if cfg.tune_delta {
                let outcome = tune_delta(FittedPredictor::Sfr { state: &state }, valid, lik, &grid, pf, Some(&ctx.cache))?;
                out.push(Evaluation {
                    mode: DeltaMode::Tuned,
                    delta: Some(outcome.best),
                    preds: state.with_prior_precision(outcome.best)?.predict_stack(&j, lik, pf)?,
                    table: Some(outcome),
                });
            }
        }
    }
    Ok(out)
}

fn modes(cfg: &ExperimentConfig) -> Vec<DeltaMode> {
    if cfg.tune_delta {
        vec![DeltaMode::None, DeltaMode::Tuned]
    } else {
        vec![DeltaMode::None]
    }
}

/// Evaluates every configured method on one trained seed. A failing method
/// yields error records and does not stop the others.
pub fn evaluate_seed(cfg: &ExperimentConfig, ctx: &SeedContext, dataset: &str) -> Vec<RunRecord> {
    let mut weight_space = WeightSpace::default();
    let mut records = Vec::new();
    let uses_inducing = |m: Method| matches!(m, Method::GpSubset | Method::Sfr);
    for &method in &cfg.methods {
        let start = Instant::now();
        let result = evaluate_method(cfg, ctx, method, &mut weight_space)
            .and_then(|evals| evals.into_iter().map(|e| Ok((score(&e.preds, &ctx.splits.test)?, e))).collect::<Result<Vec<_>>>());
        let mut seconds = start.elapsed().as_secs_f64();
        if method == Method::NnMap {
            seconds += ctx.train_seconds;
        }
        let seconds = cfg.record_timing.then_some(seconds);
        let m = uses_inducing(method).then_some(ctx.inducing.indices.len());
        match result {
            Ok(evals) => {
                for ((nlpd, acc), e) in evals {
                    records.push(RunRecord {
                        dataset: dataset.to_string(),
                        method,
                        seed: ctx.seed,
                        delta_mode: e.mode,
                        nlpd: Some(nlpd),
                        acc,
                        m,
                        delta: e.delta,
                        train_delta: cfg.train.prior_precision,
                        seconds,
                        tune_table: e.table.map(|t| t.table),
                        error: None,
                    });
                }
            }
            Err(err) => {
                log::warn!("{dataset} {method} seed {}: {err}", ctx.seed);
                for mode in modes(cfg) {
                    records.push(RunRecord {
                        dataset: dataset.to_string(),
                        method,
                        seed: ctx.seed,
                        delta_mode: mode,
                        nlpd: None,
                        acc: None,
                        m,
                        delta: None,
                        train_delta: cfg.train.prior_precision,
                        seconds,
                        tune_table: None,
                        error: Some(format!("{dataset}/{method}/seed {}: {err}", ctx.seed)),
                    });
                }
            }
        }
    }
    records
}

/// Results for already-trained seeds.
pub fn collect_results(cfg: &ExperimentConfig, data: &Dataset, contexts: &[SeedContext]) -> ExperimentResults {
    let name = data.name.clone();
    let mut per_run: Vec<RunRecord> = contexts.iter().flat_map(|ctx| evaluate_seed(cfg, ctx, &name)).collect();
    per_run.sort_by(|a, b| (a.method, a.seed, a.delta_mode).cmp(&(b.method, b.seed, b.delta_mode)));
    ExperimentResults {
        config_hash: cfg.hash(),
        dataset: DatasetSummary {
            name,
            n: data.len(),
            d: data.input_dim(),
            c: data.num_classes.max(1),
        },
        config: cfg.clone(),
        training: contexts
            .iter()
            .map(|ctx| TrainingSummary {
                seed: ctx.seed,
                steps: ctx.trace.records.last().map_or(0, |r| r.step),
                best_step: ctx.trace.best_step,
                best_valid_nlpd: ctx.trace.best_valid_nlpd(),
            })
            .collect(),
        aggregates: aggregate(&per_run),
        per_run,
    }
}

pub fn train_all(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<SeedContext>> {
    cfg.seeds.iter().map(|&seed| train_seed(cfg, data, seed)).collect()
}

/// Trains one network per seed, evaluates every method and, when
/// `output_dir` is set, writes `results.json` and `results.csv` there.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    cfg.validate()?;
    let data = cfg.load_dataset()?;
    run_experiment_on(cfg, &data)
}

pub fn run_experiment_on(cfg: &ExperimentConfig, data: &Dataset) -> Result<ExperimentResults> {
    cfg.validate()?;
    let contexts = train_all(cfg, data)?;
    let results = collect_results(cfg, data, &contexts);
    if let Some(dir) = &cfg.output_dir {
        results.write(dir)?;
    }
    Ok(results)
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl ExperimentResults {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Long-form table, one row per `(method, seed, δ-mode)`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["config_hash", "dataset", "method", "seed", "delta_mode", "nlpd", "acc", "M", "delta", "seconds"])?;
        for r in &self.per_run {
            w.write_record([
                self.config_hash.clone(),
                r.dataset.clone(),
                r.method.name().to_string(),
                r.seed.to_string(),
                r.delta_mode.name().to_string(),
                opt(r.nlpd),
                opt(r.acc),
                opt(r.m),
                opt(r.delta),
                opt(r.seconds),
            ])?;
        }
        w.flush().map_err(|e| Error::io("results.csv", e))?;
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json_path = dir.join("results.json");
        let mut f = create_file(&json_path)?;
        f.write_all(self.to_json()?.as_bytes()).map_err(|e| Error::io(&json_path, e))?;
        f.flush().map_err(|e| Error::io(&json_path, e))?;
        self.write_csv(create_file(&dir.join("results.csv"))?)
    }

    pub fn aggregate_for(&self, method: Method, mode: DeltaMode) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method && a.delta_mode == mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dataset: String,
    pub fraction: f64,
    pub method: Method,
    pub seed: u64,
    #[serde(rename = "M")]
    pub m: usize,
    pub delta: f64,
    pub nlpd: f64,
    /// At fraction 1.0, for SFR: largest relative deviation of the latent
    /// moments from the full dual GP on the test set.
    pub self_check: Option<f64>,
}

fn relative_gap(a: &[(nalgebra::DVector<f64>, DMatrix<f64>)], b: &[(nalgebra::DVector<f64>, DMatrix<f64>)]) -> f64 {
    let mut worst = 0.0_f64;
    for ((ma, va), (mb, vb)) in a.iter().zip(b) {
        for (x, y) in ma.iter().zip(mb.iter()).chain(va.iter().zip(vb.iter())) {
            worst = worst.max((x - y).abs() / y.abs().max(1.0));
        }
    }
    worst
}

/// NLPD of SFR and the GP subset as the inducing fraction varies, reusing
/// the trained networks in `contexts`. The inducing sets are prefixes of
/// one permutation per seed and therefore nested across fractions.
pub fn sweep_inducing(cfg: &ExperimentConfig, contexts: &[SeedContext], dataset: &str, fractions: &[f64]) -> Result<Vec<SweepRow>> {
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(Error::Config(format!("sweep fractions {fractions:?} must lie in (0, 1]")));
    }
    let grid = cfg.grid()?;
    let pf = cfg.pushforward;
    let delta0 = cfg.train.prior_precision;
    let mut rows = Vec::new();
    for ctx in contexts {
        let (train, valid, test) = (&ctx.splits.train, &ctx.splits.valid, &ctx.splits.test);
        let lik = &ctx.likelihood;
        let kernel = NtkKernel::new(ctx.weights.clone(), delta0)?;
        let j_test = ctx.cache.get_or_compute(&ctx.weights, TEST_CACHE_ID, &test.x)?;
        let f_test = mlp_forward(&ctx.weights, &test.x)?;
        let labels = test.targets_vec();
        let test_nlpd = |preds: Vec<PredictiveDistribution>| -> Result<f64> {
            let outputs: Vec<_> = preds.into_iter().map(|p| p.output).collect();
            nlpd(&outputs, &labels)
        };
        for &fraction in fractions {
            let m = inducing_count(train.len(), fraction);
            let inducing = select_inducing(&train.x, m, ctx.seed)?;

            let state = SfrState::fit(&kernel, train, lik, &inducing.z)?;
            let delta = if cfg.sweep_tune_delta {
                tune_delta(FittedPredictor::Sfr { state: &state }, valid, lik, &grid, pf, Some(&ctx.cache))?.best
            } else {
                delta0
            };
            let state = state.with_prior_precision(delta)?;
            let self_check = if m == train.len() {
                let duals = compute_duals(&ctx.weights, train, lik)?;
                let full = FunctionSpaceGp::fit(
                    &kernel.with_prior_precision(delta)?,
                    InputSet::named(TRAIN_CACHE_ID, &train.x),
                    &duals,
                    Some(&ctx.cache),
                    MeanSource::Dual,
                )?;
                Some(relative_gap(&state.latent_moments(&j_test)?, &full.latent_moments(&j_test, None)?))
            } else {
                None
            };
            rows.push(SweepRow {
                dataset: dataset.to_string(),
                fraction,
                method: Method::Sfr,
                seed: ctx.seed,
                m,
                delta,
                nlpd: test_nlpd(state.predict_stack(&j_test, lik, pf)?)?,
                self_check,
            });

            let subset = train.subset(&inducing.indices);
            let duals = compute_duals(&ctx.weights, &subset, lik)?;
            let gp = FunctionSpaceGp::fit(&kernel, InputSet::anonymous(&subset.x), &duals, None, MeanSource::Network)?;
            let delta = if cfg.sweep_tune_delta {
                tune_delta(FittedPredictor::GpSubset { gp: &gp }, valid, lik, &grid, pf, Some(&ctx.cache))?.best
            } else {
                delta0
            };
            rows.push(SweepRow {
                dataset: dataset.to_string(),
                fraction,
                method: Method::GpSubset,
                seed: ctx.seed,
                m,
                delta,
                nlpd: test_nlpd(gp.with_prior_precision(delta)?.predict_stack(&j_test, Some(&f_test), lik, pf)?)?,
                self_check: None,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["dataset", "fraction", "method", "seed", "M", "delta", "nlpd", "self_check"])?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.fraction.to_string(),
            r.method.name().to_string(),
            r.seed.to_string(),
            r.m.to_string(),
            r.delta.to_string(),
            r.nlpd.to_string(),
            opt(r.self_check),
        ])?;
    }
    w.flush().map_err(|e| Error::io("sweep.csv", e))?;
    Ok(())
}

/// Mean NLPD per `(method, fraction)` across seeds.
pub fn sweep_means(rows: &[SweepRow]) -> BTreeMap<(Method, u64), f64> {
    let mut sums: BTreeMap<(Method, u64), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = sums.entry((r.method, r.fraction.to_bits())).or_insert((0.0, 0));
        e.0 += r.nlpd;
        e.1 += 1;
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub num_train: usize,
    pub num_valid: usize,
    /// Inputs are drawn uniformly from `[-input_range, input_range]`.
    pub input_range: f64,
    pub noise_std: f64,
    pub hidden_widths: Vec<usize>,
    pub train: TrainConfig,
    pub inducing_fraction: f64,
    /// The prediction grid spans `[-grid_range, grid_range]`.
    pub grid_range: f64,
    pub grid_points: usize,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            num_train: 200,
            num_valid: 50,
            input_range: 2.0,
            noise_std: 0.15,
            hidden_widths: vec![50, 50],
            train: TrainConfig {
                learning_rate: 1e-3,
                // Full-batch steps for the 200 default training points.
                batch_size: 200,
                max_steps: 20_000,
                ..TrainConfig::default()
            },
            inducing_fraction: 0.2,
            grid_range: 5.0,
            grid_points: 201,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRow {
    pub x: f64,
    pub nn_mean: f64,
    pub sfr_mean: f64,
    /// Predictive standard deviation including observation noise.
    pub sfr_std: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoOutput {
    pub grid: Vec<DemoRow>,
    pub train_x: Vec<f64>,
    pub train_y: Vec<f64>,
    pub inducing_x: Vec<f64>,
    /// `min(σ at the two grid ends) / median σ over grid points inside the
    /// data range`.
    pub edge_ratio: f64,
    /// Fraction of training targets inside the ±2σ band.
    pub coverage: f64,
}

fn demo_target(x: f64) -> f64 {
    (2.0 * x).sin() + 0.3 * x
}

/// Synthetic 1-D regression: trains a network, fits SFR and evaluates the
/// predictive on a regular grid extending past the data.
pub fn regression_demo(cfg: &DemoConfig) -> Result<DemoOutput> {
    if cfg.grid_points < 2 || !(cfg.grid_range > 0.0) {
        return Err(Error::Config("demo grid needs at least two points and a positive range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sample = |n: usize| {
        let x = DMatrix::<f64>::from_fn(n, 1, |_, _| rng.random_range(-cfg.input_range..cfg.input_range));
        let y = (0..n).map(|i| demo_target(x[(i, 0)]) + cfg.noise_std * rng.sample::<f64, _>(StandardNormal)).collect();
        Dataset::regression("demo", x, y)
    };
    let train = sample(cfg.num_train);
    let valid = sample(cfg.num_valid);
    let lik = Likelihood::Gaussian {
        noise_variance: cfg.noise_std * cfg.noise_std,
    };
    let arch = MlpArchitecture::new(1, cfg.hidden_widths.clone(), 1);
    let train_cfg = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let (w, _) = train_map(&arch, &train, &valid, &lik, &train_cfg)?;
    let m = inducing_count(train.len(), cfg.inducing_fraction);
    let inducing = select_inducing(&train.x, m, cfg.seed)?;
    let kernel = NtkKernel::new(w.clone(), cfg.train.prior_precision)?;
    let state = SfrState::fit(&kernel, &train, &lik, &inducing.z)?;

    let n = cfg.grid_points;
    let grid_x = DMatrix::from_fn(n, 1, |i, _| -cfg.grid_range + 2.0 * cfg.grid_range * i as f64 / (n - 1) as f64);
    let nn = mlp_forward(&w, &grid_x)?;
    let preds = state.predict(&grid_x, &lik, PushForward::default())?;
    let grid: Vec<DemoRow> = preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let std = (p.latent_cov[(0, 0)] + cfg.noise_std * cfg.noise_std).sqrt();
            let mean = p.latent_mean[0];
            DemoRow {
                x: grid_x[(i, 0)],
                nn_mean: nn[(i, 0)],
                sfr_mean: mean,
                sfr_std: std,
                lower: mean - 2.0 * std,
                upper: mean + 2.0 * std,
            }
        })
        .collect();

    let mut inside: Vec<f64> = grid.iter().filter(|r| r.x.abs() <= cfg.input_range).map(|r| r.sfr_std).collect();
    inside.sort_by(f64::total_cmp);
    let median = if inside.is_empty() {
        f64::NAN
    } else if inside.len() % 2 == 1 {
        inside[inside.len() / 2]
    } else {
        0.5 * (inside[inside.len() / 2 - 1] + inside[inside.len() / 2])
    };
    let edge_ratio = grid[0].sfr_std.min(grid[n - 1].sfr_std) / median;

    let train_preds = state.predict(&train.x, &lik, PushForward::default())?;
    let train_y: Vec<f64> = (0..train.len())
        .map(|i| match train.target(i) {
            crate::likelihood::Target::Value(v) => v,
            crate::likelihood::Target::Class(c) => c as f64,
        })
        .collect();
    let covered = train_preds
        .iter()
        .zip(&train_y)
        .filter(|(p, y)| {
            let std = (p.latent_cov[(0, 0)] + cfg.noise_std * cfg.noise_std).sqrt();
            (**y - p.latent_mean[0]).abs() <= 2.0 * std
        })
        .count();
    Ok(DemoOutput {
        grid,
        train_x: train.x.column(0).iter().copied().collect(),
        train_y,
        inducing_x: inducing.z.column(0).iter().copied().collect(),
        edge_ratio,
        coverage: covered as f64 / train.len() as f64,
    })
}

impl DemoOutput {
    pub fn write_grid_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "nn_mean", "sfr_mean", "sfr_std", "lower", "upper"])?;
        for r in &self.grid {
            w.write_record([r.x, r.nn_mean, r.sfr_mean, r.sfr_std, r.lower, r.upper].map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("demo.csv", e))?;
        Ok(())
    }

    pub fn write_data_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "inducing"])?;
        let mut inducing: Vec<u64> = self.inducing_x.iter().map(|v| v.to_bits()).collect();
        inducing.sort_unstable();
        for (x, y) in self.train_x.iter().zip(&self.train_y) {
            let flag = inducing.binary_search(&x.to_bits()).is_ok();
            w.write_record([x.to_string(), y.to_string(), u8::from(flag).to_string()])?;
        }
        w.flush().map_err(|e| Error::io("demo_data.csv", e))?;
        Ok(())
    }
}
