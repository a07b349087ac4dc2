use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use sharq_core::data::SplitFractions;
use sharq_core::models::{DataLoss, ModelKind, OptimizerConfig, OutputSpec, Solver, DEFAULT_QUANTILES};
use sharq_core::reconcile::Method;
use sharq_core::sharq::{JointConfig, LambdaSchedule, SharqConfig};

use crate::CliError;

/// A reconciliation baseline or the hierarchical trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MethodName {
    Reconcile(Method),
    Sharq,
}

impl MethodName {
    pub const ALL: [MethodName; 8] = [
        MethodName::Reconcile(Method::Base),
        MethodName::Reconcile(Method::Bu),
        MethodName::Reconcile(Method::Gls),
        MethodName::Reconcile(Method::MintSam),
        MethodName::Reconcile(Method::MintShr),
        MethodName::Reconcile(Method::MintOls),
        MethodName::Reconcile(Method::Erm),
        MethodName::Sharq,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodName::Reconcile(m) => m.as_str(),
            MethodName::Sharq => "sharq",
        }
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "sharq" {
            return Ok(MethodName::Sharq);
        }
        s.parse::<Method>().map(MethodName::Reconcile).map_err(|e| e.to_string())
    }
}

impl Serialize for MethodName {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for MethodName {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn lambda_as_string<S: Serializer>(l: &LambdaSchedule, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&l.to_string())
}

fn lambda_from_string<'de, D: Deserializer<'de>>(d: D) -> Result<LambdaSchedule, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(|e: sharq_core::Error| serde::de::Error::custom(e.to_string()))
}

/// Everything a run depends on. Its canonical JSON is hashed into every
/// artifact; the output directory is deliberately not part of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub hierarchy: Option<PathBuf>,
    pub panel: Option<PathBuf>,
    /// The panel holds bottom series only; aggregates are summed from them.
    pub aggregate: bool,
    pub model: ModelKind,
    pub window: usize,
    pub horizon: usize,
    /// `None` trains mean forecasters.
    pub quantiles: Option<Vec<f64>>,
    #[serde(serialize_with = "lambda_as_string", deserialize_with = "lambda_from_string")]
    pub lambda: LambdaSchedule,
    pub methods: Vec<MethodName>,
    pub split: SplitFractions,
    pub normalize: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub solver: Solver,
    pub data_loss: DataLoss,
    pub skip_quantile_recon: bool,
    pub joint: bool,
    pub erm_ridge: f64,
    pub mape_epsilon: Option<f64>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::unbiased_simulation();
        RunConfig {
            hierarchy: None,
            panel: None,
            aggregate: false,
            model: ModelKind::MlpQuantile {
                hidden: ModelKind::DEFAULT_HIDDEN,
            },
            window: 10,
            horizon: 8,
            quantiles: Some(DEFAULT_QUANTILES.to_vec()),
            lambda: LambdaSchedule::default(),
            methods: MethodName::ALL.to_vec(),
            split: SplitFractions::default(),
            normalize: true,
            epochs: opt.epochs,
            learning_rate: opt.learning_rate,
            batch_size: opt.batch_size,
            solver: Solver::GradientDescent,
            data_loss: DataLoss::PinballGrid,
            skip_quantile_recon: false,
            joint: false,
            erm_ridge: 1e-6,
            mape_epsilon: None,
            seed: 0,
        }
    }
}

/// Hyper-parameter presets for the three experiment families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum HyperPreset {
    QuantileSimulation,
    UnbiasedSimulation,
    RealWorld,
}

impl RunConfig {
    pub fn preset(p: HyperPreset) -> Self {
        let (opt, window, horizon) = match p {
            HyperPreset::QuantileSimulation => (OptimizerConfig::quantile_simulation(), 128, 1),
            HyperPreset::UnbiasedSimulation => (OptimizerConfig::unbiased_simulation(), 10, 8),
            HyperPreset::RealWorld => (OptimizerConfig::real_world(), 168, 8),
        };
        RunConfig {
            window,
            horizon,
            epochs: opt.epochs,
            learning_rate: opt.learning_rate,
            batch_size: opt.batch_size,
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        // a run manifest carries its config under "config"
        let value = match value {
            serde_json::Value::Object(mut map) if map.contains_key("config_hash") && map.contains_key("config") => {
                map.remove("config").unwrap()
            }
            v => v,
        };
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.window == 0 || self.horizon == 0 {
            return bad("window and horizon must be positive".into());
        }
        if self.methods.is_empty() {
            return bad("no methods requested".into());
        }
        if let Some(q) = &self.quantiles {
            OutputSpec::quantiles(q).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        if let Some(e) = self.mape_epsilon {
            if !(e >= 0.0) {
                return bad(format!("mape epsilon {e} must be nonnegative"));
            }
        }
        if !(self.erm_ridge >= 0.0) {
            return bad(format!("erm ridge {} must be nonnegative", self.erm_ridge));
        }
        self.split.sizes(100).map_err(|e| CliError::Usage(e.to_string()))?;
        self.sharq().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.solver == Solver::Exact
            && (self.model != ModelKind::LinearAr || self.quantiles.is_some() || self.data_loss != DataLoss::MseMean)
        {
            return bad("the exact solver needs model linear-ar, no quantiles and data loss mse-mean".into());
        }
        if self.quantiles.is_none() && self.data_loss == DataLoss::PinballGrid {
            return bad("pinball-grid loss needs a quantile grid".into());
        }
        Ok(())
    }

    pub fn outputs(&self) -> OutputSpec {
        match &self.quantiles {
            Some(q) => OutputSpec::Quantiles(q.clone()),
            None => OutputSpec::Mean,
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
            solver: self.solver,
        }
    }

    pub fn sharq(&self) -> SharqConfig {
        SharqConfig {
            model: self.model,
            outputs: self.outputs(),
            lambda: self.lambda.clone(),
            optimizer: self.optimizer(),
            data_loss: self.data_loss,
            skip_quantile_recon: self.skip_quantile_recon,
            joint: self.joint.then(JointConfig::default),
            ..Default::default()
        }
    }

    pub fn canonical_json(&self) -> String {
        canonical_json(self)
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}

/// Compact JSON with object keys sorted.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config serializes");
    serde_json::to_string(&v).expect("value serializes")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
