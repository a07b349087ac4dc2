//! Forecasters `g(X, theta)` with hand-derived gradients.
//!
//! Two families share one flat parameter vector layout contract:
//! a linear autoregression with one linear map per output row, and a small
//! feed-forward network with a shared tanh trunk and one dense head per
//! output row. Output rows are either a single mean row or one row per
//! quantile level.

mod loss;
mod train;

pub use loss::{
    loss_and_gradient, pinball, pinball_grad, pinball_loss, sample_loss, DataLoss, QuadraticPull, Regularizer,
};
pub use train::{train, Objective, OptimizerConfig, Solver, TrainReport, DIVERGENCE_LIMIT};

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Default quantile grid: lower, median and upper forecasts.
pub const DEFAULT_QUANTILES: [f64; 3] = [0.05, 0.5, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    LinearAr,
    MlpQuantile { hidden: usize },
}

impl ModelKind {
    pub const DEFAULT_HIDDEN: usize = 16;
}

/// What the output rows mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputSpec {
    Mean,
    Quantiles(Vec<f64>),
}

impl OutputSpec {
    /// A validated quantile grid: strictly increasing in (0, 1), containing 0.5.
    pub fn quantiles(taus: &[f64]) -> Result<Self> {
        validate_grid(taus)?;
        Ok(OutputSpec::Quantiles(taus.to_vec()))
    }

    pub fn rows(&self) -> usize {
        match self {
            OutputSpec::Mean => 1,
            OutputSpec::Quantiles(t) => t.len(),
        }
    }

    /// Row holding the point forecast (the mean, or the median).
    pub fn center_row(&self) -> usize {
        match self {
            OutputSpec::Mean => 0,
            OutputSpec::Quantiles(t) => t.iter().position(|&x| x == 0.5).unwrap_or(t.len() / 2),
        }
    }

    pub fn taus(&self) -> Option<&[f64]> {
        match self {
            OutputSpec::Mean => None,
            OutputSpec::Quantiles(t) => Some(t),
        }
    }
}

pub fn validate_grid(taus: &[f64]) -> Result<()> {
    if taus.is_empty() {
        return Err(Error::InvalidParameter("empty quantile grid".into()));
    }
    if let Some(&t) = taus.iter().find(|&&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::InvalidQuantile(t));
    }
    if taus.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(format!(
            "quantile grid {taus:?} is not strictly increasing"
        )));
    }
    if !taus.contains(&0.5) {
        return Err(Error::MissingMedian);
    }
    Ok(())
}

/// Shape metadata of a forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub kind: ModelKind,
    pub n_features: usize,
    pub horizon: usize,
    pub outputs: OutputSpec,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, n_features: usize, horizon: usize, outputs: OutputSpec) -> Result<Self> {
        if n_features == 0 || horizon == 0 {
            return Err(Error::InvalidParameter("n_features and horizon must be positive".into()));
        }
        if let ModelKind::MlpQuantile { hidden: 0 } = kind {
            return Err(Error::InvalidParameter("hidden layer must be non-empty".into()));
        }
        if let OutputSpec::Quantiles(t) = &outputs {
            validate_grid(t)?;
        }
        Ok(ModelSpec {
            kind,
            n_features,
            horizon,
            outputs,
        })
    }

    pub fn rows(&self) -> usize {
        self.outputs.rows()
    }

    fn head_len(&self) -> usize {
        match self.kind {
            ModelKind::LinearAr => self.horizon * (self.n_features + 1),
            ModelKind::MlpQuantile { hidden } => self.horizon * (hidden + 1),
        }
    }

    fn trunk_len(&self) -> usize {
        match self.kind {
            ModelKind::LinearAr => 0,
            ModelKind::MlpQuantile { hidden } => hidden * (self.n_features + 1),
        }
    }

    pub fn n_params(&self) -> usize {
        self.trunk_len() + self.rows() * self.head_len()
    }

    /// Parameters that only affect output row `row`.
    pub fn head_range(&self, row: usize) -> Range<usize> {
        let start = self.trunk_len() + row * self.head_len();
        start..start + self.head_len()
    }
}

/// Forecast matrix of `rows x horizon`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub rows: usize,
    pub horizon: usize,
    pub values: Vec<f64>,
}

impl Forecast {
    pub fn zeros(rows: usize, horizon: usize) -> Self {
        Forecast {
            rows,
            horizon,
            values: vec![0.0; rows * horizon],
        }
    }

    pub fn get(&self, row: usize, h: usize) -> f64 {
        self.values[row * self.horizon + h]
    }

    pub fn get_mut(&mut self, row: usize, h: usize) -> &mut f64 {
        &mut self.values[row * self.horizon + h]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.horizon..(row + 1) * self.horizon]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Forecast {
        Forecast {
            rows: self.rows,
            horizon: self.horizon,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// A forecaster with its parameters and the normalization of its node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecaster {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
    pub normalization: Normalization,
}

impl Forecaster {
    /// Seeded initialisation: linear models start at zero, network weights
    /// are drawn uniformly with Glorot bounds from the `(seed, node)` stream.
    pub fn init(spec: ModelSpec, normalization: Normalization, seed: u64, node: u64) -> Self {
        let mut params = vec![0.0; spec.n_params()];
        if let ModelKind::MlpQuantile { hidden } = spec.kind {
            let mut rng = stream(seed, Purpose::Init, node);
            let nf = spec.n_features;
            let trunk_bound = (6.0 / (nf + hidden) as f64).sqrt();
            for p in params[..hidden * nf].iter_mut() {
                *p = rng.random_range(-trunk_bound..trunk_bound);
            }
            let head_bound = (6.0 / (hidden + spec.horizon) as f64).sqrt();
            for r in 0..spec.rows() {
                let range = spec.head_range(r);
                let weights = range.start..range.start + spec.horizon * hidden;
                for p in params[weights].iter_mut() {
                    *p = rng.random_range(-head_bound..head_bound);
                }
            }
        }
        Forecaster {
            spec,
            params,
            normalization,
        }
    }

    pub fn from_params(spec: ModelSpec, params: Vec<f64>, normalization: Normalization) -> Result<Self> {
        if params.len() != spec.n_params() {
            return Err(Error::mismatch(spec.n_params(), params.len(), "parameter count"));
        }
        Ok(Forecaster {
            spec,
            params,
            normalization,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Forecast in normalized units.
    pub fn forward(&self, x: &[f64]) -> Result<Forecast> {
        if x.len() != self.spec.n_features {
            return Err(Error::mismatch(self.spec.n_features, x.len(), "input features"));
        }
        Ok(self.forward_unchecked(x))
    }

    /// Forecast mapped back to the node's original units.
    pub fn forward_original(&self, x: &[f64]) -> Result<Forecast> {
        let norm = self.normalization;
        Ok(self.forward(x)?.map(|z| norm.denormalize(z)))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Forecast {
        let s = &self.spec;
        let (rows, h, nf) = (s.rows(), s.horizon, s.n_features);
        let mut out = Forecast::zeros(rows, h);
        match s.kind {
            ModelKind::LinearAr => {
                for r in 0..rows {
                    let head = &self.params[s.head_range(r)];
                    for j in 0..h {
                        let w = &head[j * (nf + 1)..(j + 1) * (nf + 1)];
                        let mut v = w[nf];
                        for f in 0..nf {
                            v += w[f] * x[f];
                        }
                        *out.get_mut(r, j) = v;
                    }
                }
            }
            ModelKind::MlpQuantile { hidden } => {
                let act = self.hidden_activations(x, hidden);
                for r in 0..rows {
                    let head = &self.params[s.head_range(r)];
                    let (weights, bias) = head.split_at(h * hidden);
                    for j in 0..h {
                        let w = &weights[j * hidden..(j + 1) * hidden];
                        let mut v = bias[j];
                        for u in 0..hidden {
                            v += w[u] * act[u];
                        }
                        *out.get_mut(r, j) = v;
                    }
                }
            }
        }
        out
    }

    fn hidden_activations(&self, x: &[f64], hidden: usize) -> Vec<f64> {
        let nf = self.spec.n_features;
        let (w1, rest) = self.params.split_at(hidden * nf);
        let b1 = &rest[..hidden];
        (0..hidden)
            .map(|u| {
                let row = &w1[u * nf..(u + 1) * nf];
                let z: f64 = b1[u] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                z.tanh()
            })
            .collect()
    }

    /// Adds `d(loss)/d(theta)` to `grad` given `d(loss)/d(output)`.
    pub(crate) fn accumulate_gradient(&self, x: &[f64], d_out: &Forecast, grad: &mut [f64]) {
        let s = &self.spec;
        let (rows, h, nf) = (s.rows(), s.horizon, s.n_features);
        match s.kind {
            ModelKind::LinearAr => {
                for r in 0..rows {
                    let range = s.head_range(r);
                    let g = &mut grad[range];
                    for j in 0..h {
                        let d = d_out.get(r, j);
                        if d == 0.0 {
                            continue;
                        }
                        let w = &mut g[j * (nf + 1)..(j + 1) * (nf + 1)];
                        for f in 0..nf {
                            w[f] += d * x[f];
                        }
                        w[nf] += d;
                    }
                }
            }
            ModelKind::MlpQuantile { hidden } => {
                let act = self.hidden_activations(x, hidden);
                let mut d_act = vec![0.0; hidden];
                for r in 0..rows {
                    let range = s.head_range(r);
                    let head = &self.params[range.clone()];
                    let g = &mut grad[range];
                    let (gw, gb) = g.split_at_mut(h * hidden);
                    for j in 0..h {
                        let d = d_out.get(r, j);
                        if d == 0.0 {
                            continue;
                        }
                        gb[j] += d;
                        let w = &head[j * hidden..(j + 1) * hidden];
                        let gwj = &mut gw[j * hidden..(j + 1) * hidden];
                        for u in 0..hidden {
                            gwj[u] += d * act[u];
                            d_act[u] += d * w[u];
                        }
                    }
                }
                let (gw1, grest) = grad.split_at_mut(hidden * nf);
                for u in 0..hidden {
                    let dz = d_act[u] * (1.0 - act[u] * act[u]);
                    if dz == 0.0 {
                        continue;
                    }
                    grest[u] += dz;
                    let row = &mut gw1[u * nf..(u + 1) * nf];
                    for f in 0..nf {
                        row[f] += dz * x[f];
                    }
                }
            }
        }
    }
}

/// Serialized model plus provenance, one file per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub node: String,
    pub model: Forecaster,
    pub training: Option<OptimizerConfig>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ck.model.params.len() != ck.model.spec.n_params() {
            return Err(Error::mismatch(
                ck.model.spec.n_params(),
                ck.model.params.len(),
                "checkpoint parameter count",
            ));
        }
        Ok(ck)
    }
}
