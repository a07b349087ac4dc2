use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{loss_and_gradient, DataLoss, Regularizer};
use super::{Forecaster, ModelKind, OutputSpec};
use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Training aborts once a batch loss exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    #[default]
    GradientDescent,
    /// Closed-form least squares; linear mean models with at most a quadratic pull.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub solver: Solver,
}

impl OptimizerConfig {
    pub fn quantile_simulation() -> Self {
        OptimizerConfig {
            epochs: 300,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 0,
            solver: Solver::GradientDescent,
        }
    }

    pub fn unbiased_simulation() -> Self {
        OptimizerConfig {
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 128,
            seed: 0,
            solver: Solver::GradientDescent,
        }
    }

    pub fn real_world() -> Self {
        OptimizerConfig {
            epochs: 1000,
            learning_rate: 0.1,
            batch_size: 128,
            seed: 0,
            solver: Solver::GradientDescent,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// What to minimise, and over which parameters.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    pub loss: DataLoss,
    pub regularizer: Option<&'a dyn Regularizer>,
    /// Parameter ranges to update; `None` updates everything.
    pub trainable: Option<&'a [Range<usize>]>,
}

impl<'a> Objective<'a> {
    pub fn new(loss: DataLoss) -> Self {
        Objective {
            loss,
            regularizer: None,
            trainable: None,
        }
    }

    pub fn with_regularizer(mut self, reg: &'a dyn Regularizer) -> Self {
        self.regularizer = Some(reg);
        self
    }

    pub fn with_trainable(mut self, ranges: &'a [Range<usize>]) -> Self {
        self.trainable = Some(ranges);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Sample-weighted mean batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// Running minimum of `epoch_losses`.
    pub best_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }

    fn push(&mut self, loss: f64) {
        let best = self.best_losses.last().map_or(loss, |&b| b.min(loss));
        self.epoch_losses.push(loss);
        self.best_losses.push(best);
    }
}

/// Fits `model` on the samples `samples` of `data`; the shuffle stream is
/// keyed by `(config.seed, data.node)`.
pub fn train(
    model: &mut Forecaster,
    data: &WindowedDataset,
    samples: Range<usize>,
    objective: Objective<'_>,
    config: &OptimizerConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if samples.is_empty() || samples.end > data.len() {
        return Err(Error::InvalidParameter(format!(
            "training range {samples:?} for {} samples",
            data.len()
        )));
    }
    if config.solver == Solver::Exact {
        return train_exact(model, data, samples, objective);
    }
    let mut order: Vec<usize> = samples.collect();
    let n = order.len();
    let batch = if config.batch_size == 0 { n } else { config.batch_size.min(n) };
    let mut rng = stream(config.seed, Purpose::Shuffle, data.node as u64);
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(config.epochs),
        best_losses: Vec::with_capacity(config.epochs),
    };
    for epoch in 0..config.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        let mut acc = 0.0;
        for chunk in order.chunks(batch) {
            let (loss, grad) = loss_and_gradient(model, data, chunk, objective.loss, objective.regularizer)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { loss, .. } => Error::NonFiniteLoss { loss, epoch },
                    other => other,
                })?;
            if loss > DIVERGENCE_LIMIT {
                return Err(Error::Divergence {
                    epoch,
                    loss,
                    limit: DIVERGENCE_LIMIT,
                });
            }
            acc += loss * chunk.len() as f64;
            step(&mut model.params, &grad, config.learning_rate, objective.trainable);
        }
        report.push(acc / n as f64);
    }
    Ok(report)
}

fn step(params: &mut [f64], grad: &[f64], lr: f64, trainable: Option<&[Range<usize>]>) {
    match trainable {
        None => params.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g),
        Some(ranges) => {
            for r in ranges {
                params[r.clone()]
                    .iter_mut()
                    .zip(&grad[r.clone()])
                    .for_each(|(p, g)| *p -= lr * g);
            }
        }
    }
}

fn train_exact(
    model: &mut Forecaster,
    data: &WindowedDataset,
    samples: Range<usize>,
    objective: Objective<'_>,
) -> Result<TrainReport> {
    if model.spec.kind != ModelKind::LinearAr
        || model.spec.outputs != OutputSpec::Mean
        || objective.loss != DataLoss::MseMean
        || objective.trainable.is_some()
    {
        return Err(Error::InvalidParameter(
            "exact solver needs a linear mean model, squared loss and all parameters trainable".into(),
        ));
    }
    let pull = match objective.regularizer {
        None => None,
        Some(reg) => Some(reg.quadratic_pull().ok_or_else(|| {
            Error::InvalidParameter("exact solver needs a quadratic regularizer".into())
        })?),
    };
    let nf = model.spec.n_features;
    let h = model.spec.horizon;
    let idx: Vec<usize> = samples.collect();
    let design = DMatrix::from_fn(idx.len(), nf + 1, |r, c| {
        if c < nf {
            data.inputs[idx[r]][c]
        } else {
            1.0
        }
    });
    // (1 + l) X'X w = X'(y + l c)  <=>  X w ~ (y + l c) / (1 + l) in least squares
    let lambda = pull.as_ref().map_or(0.0, |p| p.weight);
    let svd = design.svd(true, true);
    let cutoff = 1e-13 * svd.singular_values.max() * idx.len().max(nf + 1) as f64;
    if svd.rank(cutoff) < nf + 1 {
        log::warn!("rank-deficient design on node {}; using the minimum-norm solution", data.node);
    }
    for j in 0..h {
        let rhs = DVector::from_fn(idx.len(), |r, _| {
            let s = idx[r];
            let mut v = data.targets[s][j];
            if let Some(p) = &pull {
                v += p.weight * p.targets[s][j];
            }
            v / (1.0 + lambda)
        });
        let w = svd
            .solve(&rhs, cutoff)
            .map_err(|e| Error::Singular(format!("least squares on node {}: {e}", data.node)))?;
        let off = j * (nf + 1);
        model.params[off..off + nf + 1].copy_from_slice(w.as_slice());
    }
    let (loss, _) = loss_and_gradient(model, data, &idx, objective.loss, objective.regularizer)?;
    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        best_losses: Vec::new(),
    };
    report.push(loss);
    Ok(report)
}
