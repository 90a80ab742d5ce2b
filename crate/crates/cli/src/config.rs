//! Command-line overrides for [`ExperimentConfig`] fields.

use std::path::PathBuf;

use clap::Args;
use sfr::data::{LabelColumn, Task};
use sfr::experiment::{ExperimentConfig, Method};
use sfr::nn::Activation;
use sfr::PushForward;

use crate::{CliResult, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PushForwardKind {
    Mc,
    Probit,
}

/// Every flag is optional and, when given, replaces the config value.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub name: Option<String>,
    /// Label column name, or a zero-based index.
    #[arg(long, global = true)]
    pub label_column: Option<String>,
    #[arg(long, global = true)]
    pub delimiter: Option<char>,
    #[arg(long, global = true)]
    pub header: Option<bool>,
    /// `classification` or `regression`.
    #[arg(long, global = true)]
    pub task: Option<String>,
    #[arg(long, global = true, value_delimiter = ',', num_args = 3)]
    pub split_fractions: Option<Vec<f64>>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub hidden_widths: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub activation: Option<String>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Training prior precision.
    #[arg(long, global = true)]
    pub prior_precision: Option<f64>,
    #[arg(long, global = true)]
    pub patience: Option<usize>,
    #[arg(long, global = true)]
    pub eval_interval: Option<usize>,
    #[arg(long, global = true)]
    pub max_steps: Option<usize>,
    #[arg(long, global = true)]
    pub inducing_fraction: Option<f64>,
    /// Comma-separated subset of nn_map, bnn, glm, gp_subset, sfr.
    #[arg(long, global = true, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long, global = true)]
    pub tune_delta: Option<bool>,
    /// Tunes the prior precision per inducing fraction in `sweep`.
    #[arg(long, global = true)]
    pub sweep_tune_delta: Option<bool>,
    #[arg(long, global = true, value_enum)]
    pub pushforward: Option<PushForwardKind>,
    /// Monte Carlo samples for the pushforward.
    #[arg(long, global = true)]
    pub mc_samples: Option<usize>,
    #[arg(long, global = true)]
    pub mc_seed: Option<u64>,
    #[arg(long, global = true)]
    pub bnn_samples: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub delta_grid: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub noise_variance: Option<f64>,
    #[arg(long, global = true)]
    pub record_timing: Option<bool>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
}

fn parse_named<T: serde::de::DeserializeOwned>(what: &str, value: &str) -> CliResult<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Failure::Config(format!("unknown {what} {value:?}")))
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> CliResult {
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = &self.$flag {
                    $field = v.clone();
                })*
            };
        }
        set! {
            dataset => cfg.dataset,
            seeds => cfg.seeds,
            hidden_widths => cfg.hidden_widths,
            delimiter => cfg.csv.delimiter,
            header => cfg.csv.header,
            learning_rate => cfg.train.learning_rate,
            batch_size => cfg.train.batch_size,
            prior_precision => cfg.train.prior_precision,
            patience => cfg.train.patience,
            eval_interval => cfg.train.eval_interval,
            max_steps => cfg.train.max_steps,
            inducing_fraction => cfg.inducing_fraction,
            tune_delta => cfg.tune_delta,
            sweep_tune_delta => cfg.sweep_tune_delta,
            bnn_samples => cfg.bnn_samples,
            noise_variance => cfg.noise_variance,
            record_timing => cfg.record_timing,
        }
        if let Some(name) = &self.name {
            cfg.name = Some(name.clone());
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = Some(dir.clone());
        }
        if let Some(grid) = &self.delta_grid {
            cfg.delta_grid = Some(grid.clone());
        }
        if let Some(col) = &self.label_column {
            cfg.csv.label_column = match col.parse::<usize>() {
                Ok(i) => LabelColumn::Index(i),
                Err(_) => LabelColumn::Name(col.clone()),
            };
        }
        if let Some(task) = &self.task {
            cfg.csv.task = parse_named::<Task>("task", task)?;
        }
        if let Some(act) = &self.activation {
            cfg.activation = parse_named::<Activation>("activation", act)?;
        }
        if let Some(f) = &self.split_fractions {
            cfg.split_fractions = [f[0], f[1], f[2]];
        }
        if let Some(methods) = &self.methods {
            cfg.methods = methods.iter().map(|m| Method::parse(m)).collect::<Result<_, _>>()?;
        }
        let (mut samples, mut seed) = match cfg.pushforward {
            PushForward::MonteCarlo { samples, seed } => (samples, seed),
            PushForward::Probit => (100, 0),
        };
        if let Some(s) = self.mc_samples {
            samples = s;
        }
        if let Some(s) = self.mc_seed {
            seed = s;
        }
        let probit = match self.pushforward {
            Some(kind) => kind == PushForwardKind::Probit,
            None => cfg.pushforward == PushForward::Probit,
        };
        cfg.pushforward = if probit {
            PushForward::Probit
        } else {
            PushForward::MonteCarlo { samples, seed }
        };
        Ok(())
    }
}
