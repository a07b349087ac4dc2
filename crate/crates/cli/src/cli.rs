use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sharq_core::models::{DataLoss, ModelKind, Solver};
use sharq_core::reconcile::Method;
use sharq_core::sharq::LambdaSchedule;

use crate::config::{HyperPreset, MethodName, RunConfig};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "sharq", version, about = "Hierarchical quantile forecasting with training-time reconciliation")]
pub struct Cli {
    /// Run configuration (JSON); a run manifest is accepted too.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Only report warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic panel.
    Simulate(SimulateArgs),
    /// Train per-node models and write checkpoints.
    Train(TrainArgs),
    /// Forecast from checkpoints.
    Forecast(ForecastArgs),
    /// Reconcile base forecasts with a post-hoc method.
    Reconcile(ReconcileArgs),
    /// Score forecast tables against the panel.
    Evaluate(EvaluateArgs),
    /// Train once, run every method and evaluate.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimPreset {
    SmallUnbiased,
    LargeUnbiased,
    LognormalSine,
    GammaStep,
    GaussianStep,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub preset: SimPreset,
    /// Observations to keep (defaults: 500).
    #[arg(long)]
    pub length: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    LinearAr,
    MlpQuantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Gd,
    Exact,
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

/// A quantile grid, or `None` for mean forecasts.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileGrid(pub Option<Vec<f64>>);

fn parse_quantiles(s: &str) -> Result<QuantileGrid, String> {
    if s == "none" || s == "mean" {
        return Ok(QuantileGrid(None));
    }
    parse_list(s).map(|q| QuantileGrid(Some(q)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodList(pub Vec<MethodName>);

fn parse_methods(s: &str) -> Result<MethodList, String> {
    parse_list(s).map(MethodList)
}

fn parse_lambda(s: &str) -> Result<LambdaSchedule, String> {
    s.parse().map_err(|e: sharq_core::Error| e.to_string())
}

fn parse_loss(s: &str) -> Result<DataLoss, String> {
    match s {
        "mse-mean" => Ok(DataLoss::MseMean),
        "pinball-grid" => Ok(DataLoss::PinballGrid),
        _ => Err(format!("unknown data loss `{s}` (mse-mean, pinball-grid)")),
    }
}

/// Command-line overrides of the run configuration.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// Start from a hyper-parameter preset instead of the defaults.
    #[arg(long, value_enum, conflicts_with = "config")]
    pub preset: Option<HyperPreset>,
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// The panel holds bottom series only.
    #[arg(long)]
    pub aggregate: bool,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Comma-separated quantile levels, or `none` for mean forecasts.
    #[arg(long, value_parser = parse_quantiles)]
    pub quantiles: Option<QuantileGrid>,
    /// `3.0`, a root-first list `1.5,3.0`, or `bottom=3.0,decay=0.5`.
    #[arg(long, value_parser = parse_lambda)]
    pub lambda: Option<LambdaSchedule>,
    /// Comma-separated: base,bu,gls,mint-sam,mint-shr,mint-ols,erm,sharq.
    #[arg(long, value_parser = parse_methods)]
    pub methods: Option<MethodList>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// 0 means full batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub solver: Option<SolverArg>,
    /// mse-mean or pinball-grid.
    #[arg(long, value_parser = parse_loss)]
    pub data_loss: Option<DataLoss>,
    #[arg(long)]
    pub skip_quantile_recon: bool,
    #[arg(long)]
    pub joint: bool,
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long)]
    pub erm_ridge: Option<f64>,
    /// Floor for MAPE denominators; zero targets are an error without it.
    #[arg(long)]
    pub mape_epsilon: Option<f64>,
}

impl RunArgs {
    pub fn resolve(&self, config: Option<&PathBuf>, seed: Option<u64>) -> Result<RunConfig, CliError> {
        let mut c = match (config, self.preset) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(p)) => RunConfig::preset(p),
            (None, None) => RunConfig::default(),
        };
        if let Some(v) = &self.hierarchy {
            c.hierarchy = Some(v.clone());
        }
        if let Some(v) = &self.panel {
            c.panel = Some(v.clone());
        }
        match (self.model, self.hidden) {
            (Some(ModelArg::LinearAr), _) => c.model = ModelKind::LinearAr,
            (Some(ModelArg::MlpQuantile), h) => {
                c.model = ModelKind::MlpQuantile {
                    hidden: h.unwrap_or(ModelKind::DEFAULT_HIDDEN),
                }
            }
            (None, Some(h)) => match &mut c.model {
                ModelKind::MlpQuantile { hidden } => *hidden = h,
                ModelKind::LinearAr => return Err(CliError::Usage("--hidden needs an mlp model".into())),
            },
            (None, None) => {}
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    c.$field = v.clone();
                }
            )*};
        }
        if let Some(q) = &self.quantiles {
            c.quantiles = q.0.clone();
        }
        if let Some(m) = &self.methods {
            c.methods = m.0.clone();
        }
        set!(window, horizon, lambda, epochs, learning_rate, batch_size, data_loss, erm_ridge);
        if let Some(s) = self.solver {
            c.solver = match s {
                SolverArg::Gd => Solver::GradientDescent,
                SolverArg::Exact => Solver::Exact,
            };
        }
        if self.mape_epsilon.is_some() {
            c.mape_epsilon = self.mape_epsilon;
        }
        c.aggregate |= self.aggregate;
        c.skip_quantile_recon |= self.skip_quantile_recon;
        c.joint |= self.joint;
        if self.no_normalize {
            c.normalize = false;
        }
        if let Some(s) = seed {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Train every node independently, without the hierarchical penalty.
    #[arg(long)]
    pub base: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint directory (default: <out-dir>/checkpoints).
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Method label written to the forecast table.
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShrinkageArg {
    Auto,
    Fixed(f64),
}

fn parse_shrinkage(s: &str) -> Result<ShrinkageArg, String> {
    if s == "auto" {
        return Ok(ShrinkageArg::Auto);
    }
    s.parse::<f64>()
        .map(ShrinkageArg::Fixed)
        .map_err(|_| format!("shrinkage must be `auto` or a number, got `{s}`"))
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: sharq_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct ReconcileArgs {
    /// bu, base, gls, mint-sam, mint-shr, mint-ols or erm.
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
    /// Forecast table to reconcile.
    #[arg(long)]
    pub forecasts: PathBuf,
    /// Which method of the forecast table to use when it holds several.
    #[arg(long)]
    pub input_method: Option<String>,
    /// One-step residuals (gls, mint-sam, mint-shr).
    #[arg(long)]
    pub residuals: Option<PathBuf>,
    /// Held-out forecasts and targets (erm).
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long, default_value = "auto", value_parser = parse_shrinkage)]
    pub shrinkage: ShrinkageArg,
    #[arg(long, default_value_t = 1e-6)]
    pub erm_ridge: f64,
    /// Also write the fitted P matrix here.
    #[arg(long)]
    pub p_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Forecast tables to score; repeatable.
    #[arg(long, required = true)]
    pub forecasts: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Rerun the configuration recorded in a benchmark manifest.
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
}
