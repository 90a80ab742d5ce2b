//! `sfr`: train networks, turn them into sparse function-space posteriors and
//! run the benchmark pipeline from the command line.

mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use sfr::experiment::{self, DemoConfig, ExperimentConfig};
use sfr::metrics::{accuracy, nlpd};
use sfr::nn::Checkpoint;
use sfr::posterior::{select_inducing, inducing_count, SfrFile, SfrState};
use sfr::tuning::{tune_delta, tune_noise_sfr, FittedPredictor, TuneGrid};
use sfr::{load_csv, load_features, split_standardize, Dataset, Error, Likelihood, OutputDistribution};

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "sfr", version, about = "Sparse function-space posteriors for trained MLPs")]
struct Cli {
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a MAP network on the training split and save a checkpoint.
    Train(TrainArgs),
    /// Build an SFR posterior from a checkpoint.
    Fit(FitArgs),
    /// Predict with a saved SFR posterior.
    Predict(PredictArgs),
    /// Condition a saved SFR posterior on new labelled data.
    Update(UpdateArgs),
    /// Tune the prior precision or noise variance of a saved posterior.
    Tune(TuneArgs),
    /// Run every configured method over every seed and write results.
    Bench,
    /// NLPD of SFR and the GP subset as the number of inducing points varies.
    Sweep(SweepArgs),
    /// One-dimensional regression demo written as plot-ready CSV.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Split and initialization seed; the first configured seed by default.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Inducing selection seed; the checkpoint's split seed by default.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    state: PathBuf,
    /// CSV of raw inputs, with or without the label column.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct UpdateArgs {
    #[arg(long)]
    state: PathBuf,
    /// Labelled CSV with the training schema.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum TuneTarget {
    Delta,
    Noise,
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[arg(long)]
    state: PathBuf,
    /// Labelled validation CSV.
    #[arg(long)]
    valid: PathBuf,
    #[arg(long, value_enum, default_value = "delta")]
    target: TuneTarget,
    /// Labelled training CSV; required for noise tuning.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Saves the posterior at the selected value.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.05, 0.2, 1.0])]
    fractions: Vec<f64>,
}

#[derive(Debug, Args)]
struct DemoArgs {
    /// JSON demo config.
    #[arg(long)]
    demo_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; the configured output_dir or the working directory
    /// by default.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Core(e) if e.is_numerical() => 4,
            Failure::Core(Error::Config(_) | Error::InvalidM { .. } | Error::UnsupportedMethod { .. }) => 2,
            Failure::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "invalid configuration: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| Failure::Config(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    cli.overrides.apply(&mut cfg)?;
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    match cli.command {
        Command::Train(a) => train(&cfg, a),
        Command::Fit(a) => fit(&cfg, &cli.overrides, a),
        Command::Predict(a) => predict(&cfg, a),
        Command::Update(a) => update(&cfg, a),
        Command::Tune(a) => tune(&cfg, a),
        Command::Bench => bench(&cfg),
        Command::Sweep(a) => sweep(&cfg, a),
        Command::Demo(a) => demo(&cfg, a),
    }
}

fn require_dataset(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    if cfg.dataset.as_os_str().is_empty() {
        return Err(Failure::Config("no dataset given (--dataset or \"dataset\" in the config)".into()));
    }
    Ok(cfg.load_dataset()?)
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON value serializes"));
}

fn train(cfg: &ExperimentConfig, args: TrainArgs) -> CliResult {
    let data = require_dataset(cfg)?;
    let seed = args.seed.unwrap_or(cfg.seeds[0]);
    let ctx = experiment::train_seed(cfg, &data, seed)?;
    let mut ck = Checkpoint::new(&ctx.weights);
    ck.likelihood = Some(ctx.likelihood.clone());
    ck.prior_precision = Some(cfg.train.prior_precision);
    ck.standardization = ctx.splits.train.standardization.clone();
    ck.split_seed = Some(seed);
    ck.split_fractions = Some(cfg.split_fractions);
    ck.class_names = data.class_names.clone();
    ck.save(&args.out)?;
    info!("checkpoint written to {}", args.out.display());
    print_json(&serde_json::json!({
        "checkpoint": args.out,
        "seed": seed,
        "steps": ctx.trace.records.last().map_or(0, |r| r.step),
        "best_step": ctx.trace.best_step,
        "best_valid_nlpd": ctx.trace.best_valid_nlpd(),
    }));
    Ok(())
}

fn fit(cfg: &ExperimentConfig, overrides: &Overrides, args: FitArgs) -> CliResult {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let weights = ck.mlp()?;
    let data = require_dataset(cfg)?;
    let data = if ck.class_names.is_empty() { data } else { data.with_class_names(&ck.class_names)? };
    let split_seed = ck.split_seed.unwrap_or(cfg.seeds[0]);
    let fractions = ck.split_fractions.unwrap_or(cfg.split_fractions);
    let splits = split_standardize(&data, fractions, split_seed)?;
    if let (Some(saved), Some(now)) = (&ck.standardization, &splits.train.standardization) {
        if saved != now {
            return Err(Failure::Config("dataset does not reproduce the checkpoint's training split".into()));
        }
    }
    let lik = ck.likelihood.clone().unwrap_or_else(|| data.default_likelihood(cfg.noise_variance));
    let delta = overrides
        .prior_precision
        .or(ck.prior_precision)
        .unwrap_or(cfg.train.prior_precision);
    let m = inducing_count(splits.train.len(), cfg.inducing_fraction);
    let inducing = select_inducing(&splits.train.x, m, args.seed.unwrap_or(split_seed))?;
    let kernel = sfr::NtkKernel::new(weights, delta)?;
    let state = SfrState::fit(&kernel, &splits.train, &lik, &inducing.z)?;
    let mut file = state.to_file();
    file.likelihood = Some(lik);
    file.standardization = splits.train.standardization.clone();
    file.class_names = data.class_names.clone();
    file.save(&args.out)?;
    print_json(&serde_json::json!({
        "state": args.out,
        "M": m,
        "prior_precision": delta,
        "num_points_absorbed": state.num_points_absorbed(),
    }));
    Ok(())
}

struct Loaded {
    file: SfrFile,
    state: SfrState,
    lik: Likelihood,
}

fn load_state(path: &Path) -> CliResult<Loaded> {
    let file = SfrFile::load(path)?;
    let state = SfrState::from_file(&file)?;
    let lik = file
        .likelihood
        .clone()
        .ok_or_else(|| Failure::Config(format!("{} does not record a likelihood", path.display())))?;
    Ok(Loaded { file, state, lik })
}

impl Loaded {
    /// Reads a labelled file in the stored encoding and standardization.
    fn labelled(&self, cfg: &ExperimentConfig, path: &Path) -> CliResult<Dataset> {
        let mut data = load_csv(path, &cfg.csv)?;
        if !self.file.class_names.is_empty() {
            data = data.with_class_names(&self.file.class_names)?;
        }
        if let Some(s) = &self.file.standardization {
            s.apply(&mut data.x)?;
        }
        Ok(data)
    }

    fn save(&self, state: &SfrState, path: &Path) -> CliResult {
        let mut file = state.to_file();
        file.likelihood = Some(self.lik.clone());
        file.standardization = self.file.standardization.clone();
        file.class_names = self.file.class_names.clone();
        Ok(file.save(path)?)
    }
}

fn predict(cfg: &ExperimentConfig, args: PredictArgs) -> CliResult {
    let loaded = load_state(&args.state)?;
    let mut x = load_features(&args.input, &cfg.csv, loaded.file.input_dim)?;
    if let Some(s) = &loaded.file.standardization {
        s.apply(&mut x)?;
    }
    let preds = loaded.state.predict(&x, &loaded.lik, cfg.pushforward)?;
    let outputs: Vec<OutputDistribution> = preds.into_iter().map(|p| p.output).collect();

    let sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => Box::new(io::stdout().lock()),
    };
    write_predictions(&outputs, &loaded.file.class_names, sink)?;

    if let Ok(data) = loaded.labelled(cfg, &args.input) {
        let labels = data.targets_vec();
        let summary = serde_json::json!({
            "nlpd": nlpd(&outputs, &labels)?,
            "acc": accuracy(&outputs, &labels)?,
        });
        eprintln!("{summary}");
    }
    Ok(())
}

fn write_predictions(outputs: &[OutputDistribution], class_names: &[String], sink: Box<dyn Write>) -> CliResult {
    let mut w = csv::Writer::from_writer(sink);
    let io_err = |e: csv::Error| Failure::Core(Error::Csv(e));
    match outputs.first() {
        Some(OutputDistribution::Classes(p)) => {
            let names: Vec<String> = (0..p.len())
                .map(|k| class_names.get(k).cloned().unwrap_or_else(|| k.to_string()))
                .collect();
            let mut header = vec!["row".to_string(), "class".to_string()];
            header.extend(names.iter().map(|n| format!("p_{n}")));
            w.write_record(&header).map_err(io_err)?;
            for (i, o) in outputs.iter().enumerate() {
                let OutputDistribution::Classes(p) = o else { unreachable!("mixed output kinds") };
                let k = o.predicted_class().unwrap_or(0);
                let mut row = vec![i.to_string(), names[k].clone()];
                row.extend(p.iter().map(|v| v.to_string()));
                w.write_record(&row).map_err(io_err)?;
            }
        }
        _ => {
            w.write_record(["row", "mean", "variance"]).map_err(io_err)?;
            for (i, o) in outputs.iter().enumerate() {
                let OutputDistribution::Gaussian { mean, variance } = o else { unreachable!("mixed output kinds") };
                w.write_record([i.to_string(), mean.to_string(), variance.to_string()]).map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("predictions", e))?;
    Ok(())
}

fn update(cfg: &ExperimentConfig, args: UpdateArgs) -> CliResult {
    let loaded = load_state(&args.state)?;
    let batch = loaded.labelled(cfg, &args.data)?;
    let updated = loaded.state.update(&batch, &loaded.lik)?;
    loaded.save(&updated, &args.out)?;
    print_json(&serde_json::json!({
        "state": args.out,
        "added": batch.len(),
        "num_points_absorbed": updated.num_points_absorbed(),
    }));
    Ok(())
}

fn tune(cfg: &ExperimentConfig, args: TuneArgs) -> CliResult {
    let loaded = load_state(&args.state)?;
    let valid = loaded.labelled(cfg, &args.valid)?;
    let (outcome, tuned) = match args.target {
        TuneTarget::Delta => {
            let grid = cfg.grid()?;
            let fitted = FittedPredictor::Sfr { state: &loaded.state };
            let outcome = tune_delta(fitted, &valid, &loaded.lik, &grid, cfg.pushforward, None)?;
            let tuned = loaded.state.with_prior_precision(outcome.best)?;
            (outcome, (tuned, loaded.lik.clone()))
        }
        TuneTarget::Noise => {
            let train_path = args
                .train
                .as_ref()
                .ok_or_else(|| Failure::Config("noise tuning needs --train".into()))?;
            let train = loaded.labelled(cfg, train_path)?;
            let outcome = tune_noise_sfr(&loaded.state, &train, &valid, &TuneGrid::default_noise(), cfg.pushforward)?;
            let lik = Likelihood::Gaussian { noise_variance: outcome.best };
            let refit = SfrState::fit(loaded.state.kernel(), &train, &lik, loaded.state.inducing_inputs())?;
            (outcome, (refit, lik))
        }
    };
    if let Some(out) = &args.out {
        let target = Loaded {
            lik: tuned.1,
            ..loaded
        };
        target.save(&tuned.0, out)?;
    }
    print_json(&serde_json::to_value(&outcome).map_err(Error::from)?);
    Ok(())
}

fn bench(cfg: &ExperimentConfig) -> CliResult {
    let results = experiment::run_experiment(cfg)?;
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "{:<10} {:<6} {:>6} {:>10} {:>10} {:>8}", "method", "delta", "seeds", "nlpd", "std", "acc");
    for a in &results.aggregates {
        let _ = writeln!(
            out,
            "{:<10} {:<6} {:>6} {:>10.4} {:>10} {:>8}",
            a.method.name(),
            a.delta_mode.name(),
            a.num_seeds,
            a.nlpd_mean,
            a.nlpd_std.map_or_else(|| "-".into(), |s| format!("{s:.4}")),
            a.acc_mean.map_or_else(|| "-".into(), |s| format!("{s:.4}")),
        );
    }
    if cfg.output_dir.is_none() {
        let _ = writeln!(out, "{}", results.to_json()?);
    }
    Ok(())
}

fn sweep(cfg: &ExperimentConfig, args: SweepArgs) -> CliResult {
    let data = require_dataset(cfg)?;
    let contexts = experiment::train_all(cfg, &data)?;
    let rows = experiment::sweep_inducing(cfg, &contexts, &data.name, &args.fractions)?;
    match &cfg.output_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("sweep.csv");
            let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            experiment::write_sweep_csv(&rows, f)?;
            info!("sweep written to {}", path.display());
        }
        None => experiment::write_sweep_csv(&rows, io::stdout().lock())?,
    }
    Ok(())
}

fn demo(cfg: &ExperimentConfig, args: DemoArgs) -> CliResult {
    let mut demo_cfg = match &args.demo_config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<DemoConfig>(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        None => DemoConfig::default(),
    };
    if let Some(seed) = args.seed {
        demo_cfg.seed = seed;
    }
    let dir = args
        .out_dir
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let out = experiment::regression_demo(&demo_cfg)?;
    let create = |name: &str| {
        let path = dir.join(name);
        fs::File::create(&path).map_err(|e| Error::io(&path, e))
    };
    out.write_grid_csv(create("demo_grid.csv")?)?;
    out.write_data_csv(create("demo_data.csv")?)?;
    print_json(&serde_json::json!({
        "out_dir": dir,
        "edge_ratio": out.edge_ratio,
        "coverage": out.coverage,
    }));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(Failure::Config("x".into()).exit_code(), 2);
        assert_eq!(Failure::Core(Error::Config("x".into())).exit_code(), 2);
        assert_eq!(Failure::Core(Error::MissingLabelColumn("y".into())).exit_code(), 3);
        assert_eq!(Failure::Core(Error::NonFiniteLoss { step: 3 }).exit_code(), 4);
        assert_eq!(Failure::Core(Error::NotPositiveDefinite { dim: 2, max_jitter: 1e-3 }).exit_code(), 4);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
