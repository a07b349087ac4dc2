//! Synthetic benchmarks: a hierarchical ARIMA panel with correlated
//! innovations, and single-series signal-plus-noise sequences with skewed and
//! symmetric noise.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesPanel;
use crate::error::{Error, Result};
use crate::hierarchy::{Edge, HierarchyGraph};
use crate::rng::{stream, Purpose};

/// ARIMA(p, d, q) with AR coefficients `ar` (length p) and MA coefficients
/// `ma` (length q), driven by innovations of standard deviation `noise_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaSpec {
    pub ar: Vec<f64>,
    pub d: usize,
    pub ma: Vec<f64>,
    pub noise_scale: f64,
}

impl ArimaSpec {
    pub fn new(ar: Vec<f64>, d: usize, ma: Vec<f64>, noise_scale: f64) -> Result<Self> {
        if !(noise_scale > 0.0) || !noise_scale.is_finite() {
            return Err(Error::InvalidParameter(format!("noise scale {noise_scale}")));
        }
        if !is_stationary(&ar) {
            return Err(Error::InvalidParameter(format!(
                "AR coefficients {ar:?} are not stationary"
            )));
        }
        Ok(ArimaSpec {
            ar,
            d,
            ma,
            noise_scale,
        })
    }

    pub fn p(&self) -> usize {
        self.ar.len()
    }

    pub fn q(&self) -> usize {
        self.ma.len()
    }

    /// Runs the recursion on unit-variance innovations `shocks`, which are
    /// scaled by `noise_scale` first.
    pub fn filter(&self, shocks: &[f64]) -> Vec<f64> {
        let eps: Vec<f64> = shocks.iter().map(|e| e * self.noise_scale).collect();
        let mut w = vec![0.0; eps.len()];
        for t in 0..eps.len() {
            let mut v = eps[t];
            for (i, phi) in self.ar.iter().enumerate() {
                if t > i {
                    v += phi * w[t - i - 1];
                }
            }
            for (j, theta) in self.ma.iter().enumerate() {
                if t > j {
                    v += theta * eps[t - j - 1];
                }
            }
            w[t] = v;
        }
        for _ in 0..self.d {
            let mut acc = 0.0;
            for v in w.iter_mut() {
                acc += *v;
                *v = acc;
            }
        }
        w
    }
}

/// True when every root of `1 - sum_i phi_i z^i` lies outside the unit
/// circle, checked through the reflection coefficients (step-down recursion).
pub fn is_stationary(phi: &[f64]) -> bool {
    let mut a = phi.to_vec();
    while let Some(&k) = a.last() {
        if !k.is_finite() || k.abs() >= 1.0 {
            return false;
        }
        let p = a.len();
        let denom = 1.0 - k * k;
        let lower: Vec<f64> = (0..p - 1).map(|i| (a[i] + k * a[p - 2 - i]) / denom).collect();
        a = lower;
    }
    true
}

/// `1 + sum_j theta_j z^j` has all roots outside the unit circle.
pub fn is_invertible(theta: &[f64]) -> bool {
    let neg: Vec<f64> = theta.iter().map(|t| -t).collect();
    is_stationary(&neg)
}

/// Space the per-series ARIMA specifications are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaSpace {
    pub max_p: usize,
    pub max_q: usize,
    pub d_choices: Vec<usize>,
    /// AR and MA coefficients are uniform on `[-bound, bound]`.
    pub coefficient_bound: f64,
    pub noise_scale: f64,
    pub max_retries: usize,
}

impl Default for ArimaSpace {
    fn default() -> Self {
        ArimaSpace {
            max_p: 2,
            max_q: 2,
            d_choices: vec![0, 1],
            coefficient_bound: 0.5,
            noise_scale: 1.0,
            max_retries: 100,
        }
    }
}

impl ArimaSpace {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<ArimaSpec> {
        if self.d_choices.is_empty() {
            return Err(Error::InvalidParameter("empty d choices".into()));
        }
        let b = self.coefficient_bound;
        for _ in 0..self.max_retries.max(1) {
            let p = rng.random_range(0..=self.max_p);
            let q = rng.random_range(0..=self.max_q);
            let d = self.d_choices[rng.random_range(0..self.d_choices.len())];
            let ar: Vec<f64> = (0..p).map(|_| rng.random_range(-b..=b)).collect();
            let ma: Vec<f64> = (0..q).map(|_| rng.random_range(-b..=b)).collect();
            if is_stationary(&ar) && is_invertible(&ma) {
                return ArimaSpec::new(ar, d, ma, self.noise_scale);
            }
        }
        Err(Error::NonStationary(self.max_retries))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArimaSource {
    Sampled(ArimaSpace),
    /// Every bottom series uses the same specification.
    Fixed(ArimaSpec),
}

/// A random tree with at most `max_nodes` nodes (at least 3): leaves are
/// split into 2 or 3 children until the budget runs out or a split is
/// declined. With `signed`, about one edge in five is negative.
pub fn random_hierarchy<R: Rng>(rng: &mut R, max_nodes: usize, signed: bool) -> HierarchyGraph {
    let max_nodes = max_nodes.max(3);
    let mut edges = Vec::new();
    let mut leaves = vec![("T".to_string(), 1usize)];
    let mut count = 1;
    while !leaves.is_empty() {
        let room = max_nodes - count;
        if room < 2 || (count > 1 && rng.random_bool(0.25)) {
            break;
        }
        let pick = rng.random_range(0..leaves.len());
        let (parent, depth) = leaves.swap_remove(pick);
        if depth >= 5 {
            leaves.push((parent, depth));
            continue;
        }
        let k = rng.random_range(2..=room.min(3));
        for c in 0..k {
            let child = format!("{parent}.{}", c + 1);
            let sign = if signed && rng.random_bool(0.2) { -1 } else { 1 };
            edges.push(Edge::signed(parent.clone(), child.clone(), sign));
            leaves.push((child, depth + 1));
        }
        count += k;
    }
    HierarchyGraph::from_edges(&edges).expect("generated tree is valid")
}

/// Configuration of the hierarchical simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Fan-out per level, top first; `[2, 2]` gives 7 nodes and 4 bottoms.
    pub fanouts: Vec<usize>,
    pub length: usize,
    pub holdout: usize,
    pub sibling_correlation: f64,
    pub other_correlation: f64,
    /// Constant added to every bottom series.
    pub level: f64,
    pub burn_in: usize,
    pub arima: ArimaSource,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            fanouts: vec![2, 2],
            length: 500,
            holdout: 8,
            sibling_correlation: 0.7,
            other_correlation: 0.2,
            level: 200.0,
            burn_in: 100,
            arima: ArimaSource::Sampled(ArimaSpace::default()),
            seed: 0,
        }
    }
}

impl SimConfig {
    /// 4 bottom series, h = 8.
    pub fn small(seed: u64) -> Self {
        SimConfig {
            seed,
            ..Default::default()
        }
    }

    /// 160 bottom series, h = 16.
    pub fn large(seed: u64) -> Self {
        SimConfig {
            fanouts: vec![4, 5, 8],
            holdout: 16,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fanouts.is_empty() || self.fanouts.iter().any(|&f| f < 2) {
            return Err(Error::InvalidParameter(format!(
                "fan-outs {:?} must be non-empty and each >= 2",
                self.fanouts
            )));
        }
        if self.length <= self.holdout {
            return Err(Error::InvalidParameter(format!(
                "length {} must exceed holdout {}",
                self.length, self.holdout
            )));
        }
        for (name, r) in [
            ("sibling", self.sibling_correlation),
            ("other", self.other_correlation),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidParameter(format!("{name} correlation {r} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Output of [`simulate_hierarchy`].
#[derive(Debug, Clone)]
pub struct SimulatedHierarchy {
    pub panel: TimeSeriesPanel,
    pub specs: Vec<ArimaSpec>,
    /// Unit-scale correlated innovations per bottom series, aligned with the
    /// panel's time axis.
    pub innovations: Vec<Vec<f64>>,
    /// Configured innovation correlation among bottom series.
    pub correlation: DMatrix<f64>,
}

/// Block correlation among bottom series: `sibling` for series sharing a
/// parent, `other` elsewhere.
pub fn innovation_correlation(graph: &HierarchyGraph, sibling: f64, other: f64) -> DMatrix<f64> {
    let m = graph.m();
    let k = graph.k();
    DMatrix::from_fn(m, m, |a, b| {
        if a == b {
            1.0
        } else if graph.parent(k + a).map(|p| p.0) == graph.parent(k + b).map(|p| p.0) {
            sibling
        } else {
            other
        }
    })
}

pub fn simulate_hierarchy(config: &SimConfig) -> Result<SimulatedHierarchy> {
    config.validate()?;
    let graph = Arc::new(HierarchyGraph::balanced(&config.fanouts)?);
    let m = graph.m();
    let total = config.length + config.burn_in;

    let specs = (0..m)
        .map(|j| match &config.arima {
            ArimaSource::Fixed(spec) => Ok(spec.clone()),
            ArimaSource::Sampled(space) => {
                space.sample(&mut stream(config.seed, Purpose::Coefficients, j as u64))
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let correlation = innovation_correlation(&graph, config.sibling_correlation, config.other_correlation);
    let chol = correlation
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("innovation correlation is not positive definite".into()))?;
    let l = chol.l();

    let raw: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            let mut rng = stream(config.seed, Purpose::Innovations, j as u64);
            (0..total).map(|_| rng.sample(StandardNormal)).collect()
        })
        .collect();
    let mut shocks = vec![vec![0.0; total]; m];
    for t in 0..total {
        for a in 0..m {
            let mut v = 0.0;
            for b in 0..=a {
                v += l[(a, b)] * raw[b][t];
            }
            shocks[a][t] = v;
        }
    }

    let bottom: Vec<Vec<f64>> = specs
        .iter()
        .zip(&shocks)
        .map(|(spec, e)| {
            spec.filter(e)[config.burn_in..]
                .iter()
                .map(|v| v + config.level)
                .collect()
        })
        .collect();
    let innovations = shocks.into_iter().map(|e| e[config.burn_in..].to_vec()).collect();
    let panel = TimeSeriesPanel::from_bottom(graph, bottom, None)?;
    Ok(SimulatedHierarchy {
        panel,
        specs,
        innovations,
        correlation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequenceKind {
    /// Sinusoid of increasing frequency with log-normal noise.
    LognormalSine,
    /// Piecewise-constant steps with gamma noise.
    GammaStep,
    /// Piecewise-constant steps with Gaussian noise.
    GaussianStep,
}

/// Signal and noise kept apart so their statistics can be checked.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSequence {
    pub signal: Vec<f64>,
    pub noise: Vec<f64>,
    pub values: Vec<f64>,
}

pub const LOGNORMAL_SIGMA: f64 = 0.5;
pub const GAMMA_SHAPE: f64 = 2.0;
pub const GAMMA_SCALE: f64 = 1.0;
pub const GAUSSIAN_SIGMA: f64 = 1.0;
const STEP_LEVELS: [f64; 5] = [0.0, 4.0, 1.0, 5.0, 2.0];

pub fn simulate_quantile_sequence(kind: SequenceKind, len: usize, seed: u64) -> Result<QuantileSequence> {
    if len < 100 {
        return Err(Error::InvalidParameter(format!("sequence length {len} < 100")));
    }
    let n = len as f64;
    let signal: Vec<f64> = (0..len)
        .map(|t| {
            let u = t as f64 / n;
            match kind {
                SequenceKind::LognormalSine => 5.0 * (2.0 * std::f64::consts::PI * 4.0 * u * (1.0 + u)).sin(),
                SequenceKind::GammaStep | SequenceKind::GaussianStep => {
                    STEP_LEVELS[(t * STEP_LEVELS.len() / len).min(STEP_LEVELS.len() - 1)]
                }
            }
        })
        .collect();
    let mut rng = stream(seed, Purpose::Noise, kind as u64);
    let noise: Vec<f64> = match kind {
        SequenceKind::LognormalSine => {
            let d = LogNormal::new(0.0, LOGNORMAL_SIGMA).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            (0..len).map(|_| d.sample(&mut rng)).collect()
        }
        SequenceKind::GammaStep => {
            let d = Gamma::new(GAMMA_SHAPE, GAMMA_SCALE).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            (0..len).map(|_| d.sample(&mut rng)).collect()
        }
        SequenceKind::GaussianStep => {
            let d = Normal::new(0.0, GAUSSIAN_SIGMA).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            (0..len).map(|_| d.sample(&mut rng)).collect()
        }
    };
    let values = signal.iter().zip(&noise).map(|(s, e)| s + e).collect();
    Ok(QuantileSequence { signal, noise, values })
}
