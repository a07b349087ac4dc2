use std::collections::BTreeMap;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::LambdaSchedule;
use crate::data::{HierarchicalDataset, WindowedDataset};
use crate::error::{Error, Result};
use crate::hierarchy::HierarchyGraph;
use crate::models::{
    sample_loss, train, DataLoss, Forecast, Forecaster, ModelKind, ModelSpec, Objective, OptimizerConfig,
    OutputSpec, QuadraticPull, Regularizer, TrainReport, DEFAULT_QUANTILES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Leaf,
    Median,
    Joint,
    QuantileRecon,
}

impl Stage {
    fn name(&self) -> &'static str {
        match self {
            Stage::Leaf => "leaf",
            Stage::Median => "median",
            Stage::Joint => "joint",
            Stage::QuantileRecon => "quantile-recon",
        }
    }
}

/// Alternating refits of every node against its parent and children until
/// the total objective settles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub max_sweeps: usize,
    /// Relative change of the total objective that ends the sweeps.
    pub tol: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            max_sweeps: 200,
            tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharqConfig {
    pub model: ModelKind,
    pub outputs: OutputSpec,
    pub lambda: LambdaSchedule,
    pub optimizer: OptimizerConfig,
    /// Optimizer of the spread-matching fine-tune; defaults to `optimizer`.
    pub stage3_optimizer: Option<OptimizerConfig>,
    pub data_loss: DataLoss,
    /// Data-fit overrides for aggregate levels (e.g. a mean at sparse levels).
    pub level_loss: BTreeMap<usize, DataLoss>,
    pub skip_quantile_recon: bool,
    pub joint: Option<JointConfig>,
    /// Train the nodes of one level on the rayon pool.
    pub parallel: bool,
    /// Visit the nodes of a level in reverse; has no effect on the result.
    pub reverse_level_order: bool,
}

impl Default for SharqConfig {
    fn default() -> Self {
        SharqConfig {
            model: ModelKind::MlpQuantile {
                hidden: ModelKind::DEFAULT_HIDDEN,
            },
            outputs: OutputSpec::Quantiles(DEFAULT_QUANTILES.to_vec()),
            lambda: LambdaSchedule::default(),
            optimizer: OptimizerConfig::quantile_simulation(),
            stage3_optimizer: None,
            data_loss: DataLoss::PinballGrid,
            level_loss: BTreeMap::new(),
            skip_quantile_recon: false,
            joint: None,
            parallel: true,
            reverse_level_order: false,
        }
    }
}

impl SharqConfig {
    pub fn validate(&self) -> Result<()> {
        self.lambda.validate()?;
        self.optimizer.validate()?;
        if let Some(o) = &self.stage3_optimizer {
            o.validate()?;
        }
        Ok(())
    }

    pub fn spec_for(&self, data: &WindowedDataset) -> Result<ModelSpec> {
        ModelSpec::new(self.model, data.n_features, data.horizon, self.outputs.clone())
    }

    pub fn loss_for(&self, graph: &HierarchyGraph, node: usize) -> DataLoss {
        if graph.is_bottom(node) {
            self.data_loss
        } else {
            self.level_loss.get(&graph.level(node)).copied().unwrap_or(self.data_loss)
        }
    }

    /// Penalty weight of every node; zero at bottom nodes.
    pub fn lambdas(&self, graph: &HierarchyGraph) -> Vec<f64> {
        let depth = graph.depth();
        (0..graph.n())
            .map(|i| if graph.is_bottom(i) { 0.0 } else { self.lambda.at(graph.level(i), depth) })
            .collect()
    }
}

/// Pull of the center row towards the signed sum of the children's centers.
pub struct MedianCoherence {
    pub lambda: f64,
    pub center: usize,
    /// Per dataset sample, per horizon, in the node's normalized units.
    pub targets: Vec<Vec<f64>>,
}

impl Regularizer for MedianCoherence {
    fn penalty(&self, sample: usize, output: &Forecast, d_out: &mut Forecast) -> f64 {
        let t = &self.targets[sample];
        let mut v = 0.0;
        for (j, &tj) in t.iter().enumerate() {
            let d = output.get(self.center, j) - tj;
            v += self.lambda * d * d;
            *d_out.get_mut(self.center, j) += 2.0 * self.lambda * d;
        }
        v
    }

    fn quadratic_pull(&self) -> Option<QuadraticPull<'_>> {
        Some(QuadraticPull {
            weight: self.lambda,
            targets: &self.targets,
        })
    }
}

/// Matches squared quantile spreads of a node to the signed sum of its
/// children's, offset by the incoherency variance.
pub struct SpreadMatching {
    pub lambda: f64,
    pub center: usize,
    /// `sum_k sign_k (s_k / s_i)^2 (Q_k - M_k)^2` per sample; the center row
    /// is unused.
    pub child_terms: Vec<Forecast>,
    pub var_eps: f64,
}

impl Regularizer for SpreadMatching {
    fn penalty(&self, sample: usize, output: &Forecast, d_out: &mut Forecast) -> f64 {
        let child = &self.child_terms[sample];
        let mut v = 0.0;
        for r in (0..output.rows).filter(|&r| r != self.center) {
            for j in 0..output.horizon {
                let spread = output.get(r, j) - output.get(self.center, j);
                let inner = spread * spread - child.get(r, j) + self.var_eps;
                v += self.lambda * inner * inner;
                let g = 4.0 * self.lambda * inner * spread;
                *d_out.get_mut(r, j) += g;
                *d_out.get_mut(self.center, j) -= g;
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub node: String,
    pub stage: Stage,
    pub epochs: usize,
    pub final_loss: Option<f64>,
}

/// Independently trained per-node models.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModels {
    pub models: Vec<Forecaster>,
    pub reports: Vec<TrainReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharqState {
    pub models: Vec<Forecaster>,
    pub stages: Vec<Stage>,
    pub lambdas: Vec<f64>,
    /// Variance of the median incoherency per aggregate node, in that node's
    /// normalized units.
    pub var_eps: Vec<Option<f64>>,
    pub records: Vec<StageRecord>,
}

impl SharqState {
    /// Forecasts of every node for dataset sample `sample`, original units.
    pub fn forecast(&self, data: &HierarchicalDataset, sample: usize) -> Result<Vec<Forecast>> {
        self.models
            .iter()
            .zip(&data.nodes)
            .map(|(m, d)| m.forward_original(&d.inputs[sample]))
            .collect()
    }

    /// `Var(eps)` of `node` in original units.
    pub fn var_eps_original(&self, node: usize) -> Option<f64> {
        let s = self.models[node].normalization.scale;
        self.var_eps[node].map(|v| v * s * s)
    }

    /// Total regularized objective over `samples`.
    pub fn objective(&self, data: &HierarchicalDataset, config: &SharqConfig, samples: Range<usize>) -> Result<f64> {
        let cache = forecast_all(&self.models, data);
        let losses: Vec<DataLoss> = (0..data.graph.n()).map(|i| config.loss_for(&data.graph, i)).collect();
        coherency_objective(data, &cache, &self.lambdas, &config.outputs, &losses, samples)
    }
}

fn forecast_node(model: &Forecaster, data: &WindowedDataset) -> Vec<Forecast> {
    data.inputs.iter().map(|x| model.forward_unchecked(x)).collect()
}

fn forecast_all(models: &[Forecaster], data: &HierarchicalDataset) -> Vec<Vec<Forecast>> {
    models.iter().zip(&data.nodes).map(|(m, d)| forecast_node(m, d)).collect()
}

/// Signed children sum of center rows, mapped into `node`'s normalized units,
/// for every dataset sample.
fn median_targets(data: &HierarchicalDataset, node: usize, center: usize, cache: &[Vec<Forecast>]) -> Vec<Vec<f64>> {
    let g = &data.graph;
    let norm_i = data.nodes[node].normalization;
    let children = g.children(node);
    (0..data.n_samples())
        .map(|s| {
            (0..data.horizon)
                .map(|j| {
                    let c: f64 = children
                        .iter()
                        .map(|&(k, sg)| sg as f64 * data.nodes[k].normalization.denormalize(cache[k][s].get(center, j)))
                        .sum();
                    norm_i.normalize(c)
                })
                .collect()
        })
        .collect()
}

/// `sum_i [ mean_s data_i(s) + lambda_i mean_s ||g_i - sum_k sign_k g_k||^2 ]`
/// with every term in the owning node's normalized units. `forecasts[node]`
/// holds normalized forecasts for every dataset sample.
pub fn coherency_objective(
    data: &HierarchicalDataset,
    forecasts: &[Vec<Forecast>],
    lambdas: &[f64],
    outputs: &OutputSpec,
    losses: &[DataLoss],
    samples: Range<usize>,
) -> Result<f64> {
    let g = &data.graph;
    let n = g.n();
    if forecasts.len() != n || lambdas.len() != n || losses.len() != n {
        return Err(Error::mismatch(n, forecasts.len(), "objective nodes"));
    }
    if samples.is_empty() || samples.end > data.n_samples() {
        return Err(Error::InvalidParameter(format!("objective samples {samples:?}")));
    }
    let center = outputs.center_row();
    let count = samples.len() as f64;
    let mut total = 0.0;
    for i in 0..n {
        let mut fit = 0.0;
        for s in samples.clone() {
            fit += sample_loss(outputs, losses[i], &forecasts[i][s], &data.nodes[i].targets[s])?;
        }
        total += fit / count;
        if lambdas[i] > 0.0 {
            let targets = median_targets(data, i, center, forecasts);
            let mut pen = 0.0;
            for s in samples.clone() {
                for (j, t) in targets[s].iter().enumerate() {
                    pen += (forecasts[i][s].get(center, j) - t).powi(2);
                }
            }
            total += lambdas[i] * pen / count;
        }
    }
    Ok(total)
}

struct Fit<'a> {
    data: &'a HierarchicalDataset,
    config: &'a SharqConfig,
}

impl Fit<'_> {
    fn fresh(&self, node: usize) -> Result<Forecaster> {
        let d = &self.data.nodes[node];
        let spec = self.config.spec_for(d)?;
        Ok(Forecaster::init(spec, d.normalization, self.config.optimizer.seed, node as u64))
    }

    fn run(
        &self,
        node: usize,
        mut model: Forecaster,
        reg: Option<&dyn Regularizer>,
        trainable: Option<&[Range<usize>]>,
        optimizer: &OptimizerConfig,
        stage: Stage,
    ) -> Result<(Forecaster, StageRecord)> {
        let objective = Objective {
            loss: self.config.loss_for(&self.data.graph, node),
            regularizer: reg,
            trainable,
        };
        let id = self.data.graph.id(node);
        let report = train(&mut model, &self.data.nodes[node], self.data.split.train.clone(), objective, optimizer)
            .map_err(|e| e.at_stage(id, stage.name()))?;
        let record = StageRecord {
            node: id.to_string(),
            stage,
            epochs: report.epoch_losses.len(),
            final_loss: report.final_loss(),
        };
        Ok((model, record))
    }
}

fn run_nodes<T, F>(nodes: &[usize], parallel: bool, reverse: bool, f: F) -> Result<Vec<(usize, T)>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let mut order = nodes.to_vec();
    if reverse {
        order.reverse();
    }
    let out: Vec<Result<(usize, T)>> = if parallel {
        order.par_iter().map(|&i| f(i).map(|t| (i, t))).collect()
    } else {
        order.iter().map(|&i| f(i).map(|t| (i, t))).collect()
    };
    let mut out = out.into_iter().collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|(i, _)| *i);
    Ok(out)
}

fn check_dataset(data: &HierarchicalDataset) -> Result<()> {
    if data.nodes.len() != data.graph.n() {
        return Err(Error::mismatch(data.graph.n(), data.nodes.len(), "dataset nodes"));
    }
    if data.split.train.is_empty() {
        return Err(Error::InvalidParameter("empty training split".into()));
    }
    Ok(())
}

/// Every node fitted on its own, with the same initialisation, loss and
/// optimizer streams the hierarchical trainer uses for its first stage.
pub fn train_base(data: &HierarchicalDataset, config: &SharqConfig) -> Result<BaseModels> {
    config.validate()?;
    check_dataset(data)?;
    let nodes: Vec<usize> = (0..data.graph.n()).collect();
    let out = run_nodes(&nodes, config.parallel, false, |i| {
        let d = &data.nodes[i];
        let spec = config.spec_for(d)?;
        let mut model = Forecaster::init(spec, d.normalization, config.optimizer.seed, i as u64);
        let objective = Objective::new(config.loss_for(&data.graph, i));
        let report = train(&mut model, d, data.split.train.clone(), objective, &config.optimizer)
            .map_err(|e| e.at_stage(data.graph.id(i), "base"))?;
        Ok((model, report))
    })?;
    let (models, reports) = out.into_iter().map(|(_, t)| t).unzip();
    Ok(BaseModels { models, reports })
}

/// Bottom-up hierarchical training.
///
/// Leaves are fitted without regularization. Aggregate levels follow from
/// the deepest up, each node pulled towards its frozen children's median.
/// The median incoherency variance is then estimated on the training split,
/// and the non-median heads of every penalized aggregate are fine-tuned to
/// match its children's quantile spreads, again bottom-up.
pub fn train_sharq(data: &HierarchicalDataset, config: &SharqConfig) -> Result<SharqState> {
    config.validate()?;
    check_dataset(data)?;
    let g = &data.graph;
    let n = g.n();
    let depth = g.depth();
    let center = config.outputs.center_row();
    let lambdas = config.lambdas(g);
    let fit = Fit { data, config };
    let mut records = Vec::new();
    let mut models: Vec<Option<Forecaster>> = vec![None; n];
    let mut cache: Vec<Vec<Forecast>> = vec![Vec::new(); n];
    let mut stages = vec![Stage::Leaf; n];

    let leaves: Vec<usize> = (0..n).filter(|&i| g.is_bottom(i)).collect();
    for (i, (m, rec)) in run_nodes(&leaves, config.parallel, config.reverse_level_order, |i| {
        fit.run(i, fit.fresh(i)?, None, None, &config.optimizer, Stage::Leaf)
    })? {
        cache[i] = forecast_node(&m, &data.nodes[i]);
        models[i] = Some(m);
        records.push(rec);
    }

    let levels_up: Vec<Vec<usize>> = (1..depth)
        .rev()
        .map(|l| g.nodes_at_level(l).into_iter().filter(|&i| !g.is_bottom(i)).collect())
        .collect();

    for level in &levels_up {
        let done = run_nodes(level, config.parallel, config.reverse_level_order, |i| {
            if lambdas[i] > 0.0 {
                let reg = MedianCoherence {
                    lambda: lambdas[i],
                    center,
                    targets: median_targets(data, i, center, &cache),
                };
                fit.run(i, fit.fresh(i)?, Some(&reg), None, &config.optimizer, Stage::Median)
            } else {
                fit.run(i, fit.fresh(i)?, None, None, &config.optimizer, Stage::Median)
            }
        })?;
        for (i, (m, rec)) in done {
            cache[i] = forecast_node(&m, &data.nodes[i]);
            models[i] = Some(m);
            stages[i] = Stage::Median;
            records.push(rec);
        }
    }
    let mut models: Vec<Forecaster> = models.into_iter().map(|m| m.expect("every node trained")).collect();

    if let Some(joint) = config.joint {
        joint_sweeps(&fit, &joint, &lambdas, &mut models, &mut cache, &mut records)?;
        for i in (0..n).filter(|&i| lambdas[i] > 0.0 || g.parent(i).is_some_and(|(p, _)| lambdas[p] > 0.0)) {
            stages[i] = Stage::Joint;
        }
    }

    let mut var_eps = vec![None; n];
    for i in (0..n).filter(|&i| !g.is_bottom(i)) {
        var_eps[i] = Some(incoherency_variance(data, i, center, &cache));
    }

    let rows = config.outputs.rows();
    if !config.skip_quantile_recon && rows > 1 {
        let opt = config.stage3_optimizer.clone().unwrap_or_else(|| config.optimizer.clone());
        for level in &levels_up {
            let active: Vec<usize> = level.iter().copied().filter(|&i| lambdas[i] > 0.0).collect();
            let done = run_nodes(&active, config.parallel, config.reverse_level_order, |i| {
                let spec = &models[i].spec;
                let heads: Vec<Range<usize>> = (0..rows).filter(|&r| r != center).map(|r| spec.head_range(r)).collect();
                let reg = SpreadMatching {
                    lambda: lambdas[i],
                    center,
                    child_terms: spread_child_terms(data, i, center, rows, &cache),
                    var_eps: var_eps[i].unwrap_or(0.0),
                };
                fit.run(i, models[i].clone(), Some(&reg), Some(&heads), &opt, Stage::QuantileRecon)
            })?;
            for (i, (m, rec)) in done {
                cache[i] = forecast_node(&m, &data.nodes[i]);
                models[i] = m;
                stages[i] = Stage::QuantileRecon;
                records.push(rec);
            }
        }
    }

    Ok(SharqState {
        models,
        stages,
        lambdas,
        var_eps,
        records,
    })
}

fn incoherency_variance(data: &HierarchicalDataset, node: usize, center: usize, cache: &[Vec<Forecast>]) -> f64 {
    let targets = median_targets(data, node, center, cache);
    let resid: Vec<f64> = data
        .split
        .train
        .clone()
        .flat_map(|s| (0..data.horizon).map(move |j| (s, j)))
        .map(|(s, j)| cache[node][s].get(center, j) - targets[s][j])
        .collect();
    if resid.len() < 2 {
        return 0.0;
    }
    let mean = resid.iter().sum::<f64>() / resid.len() as f64;
    resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (resid.len() - 1) as f64
}

fn spread_child_terms(
    data: &HierarchicalDataset,
    node: usize,
    center: usize,
    rows: usize,
    cache: &[Vec<Forecast>],
) -> Vec<Forecast> {
    let s_i = data.nodes[node].normalization.scale;
    let children = data.graph.children(node);
    (0..data.n_samples())
        .map(|s| {
            let mut f = Forecast::zeros(rows, data.horizon);
            for &(k, sg) in children {
                let ratio = data.nodes[k].normalization.scale / s_i;
                let w = sg as f64 * ratio * ratio;
                let q = &cache[k][s];
                for r in (0..rows).filter(|&r| r != center) {
                    for j in 0..data.horizon {
                        *f.get_mut(r, j) += w * (q.get(r, j) - q.get(center, j)).powi(2);
                    }
                }
            }
            f
        })
        .collect()
}

/// Pull of a node's center row combining its own children constraint and its
/// role as a child in its parent's constraint.
struct BlockPull {
    weight: f64,
    center: usize,
    targets: Vec<Vec<f64>>,
}

impl Regularizer for BlockPull {
    fn penalty(&self, sample: usize, output: &Forecast, d_out: &mut Forecast) -> f64 {
        let mut v = 0.0;
        for (j, &t) in self.targets[sample].iter().enumerate() {
            let d = output.get(self.center, j) - t;
            v += self.weight * d * d;
            *d_out.get_mut(self.center, j) += 2.0 * self.weight * d;
        }
        v
    }

    fn quadratic_pull(&self) -> Option<QuadraticPull<'_>> {
        Some(QuadraticPull {
            weight: self.weight,
            targets: &self.targets,
        })
    }
}

fn block_pull(
    data: &HierarchicalDataset,
    node: usize,
    center: usize,
    lambdas: &[f64],
    cache: &[Vec<Forecast>],
) -> Option<BlockPull> {
    let g = &data.graph;
    let norm_i = data.nodes[node].normalization;
    let own = (lambdas[node] > 0.0).then(|| (lambdas[node], median_targets(data, node, center, cache)));
    let up = g.parent(node).filter(|&(p, _)| lambdas[p] > 0.0).map(|(p, sign)| {
        let ratio = norm_i.scale / data.nodes[p].normalization.scale;
        let weight = lambdas[p] * ratio * ratio;
        let denorm = |k: usize, s: usize, j: usize| data.nodes[k].normalization.denormalize(cache[k][s].get(center, j));
        let targets: Vec<Vec<f64>> = (0..data.n_samples())
            .map(|s| {
                (0..data.horizon)
                    .map(|j| {
                        let others: f64 = g
                            .children(p)
                            .iter()
                            .filter(|&&(k, _)| k != node)
                            .map(|&(k, sg)| sg as f64 * denorm(k, s, j))
                            .sum();
                        norm_i.normalize(sign as f64 * (denorm(p, s, j) - others))
                    })
                    .collect()
            })
            .collect();
        (weight, targets)
    });
    match (own, up) {
        (None, None) => None,
        (Some((w, t)), None) | (None, Some((w, t))) => Some(BlockPull {
            weight: w,
            center,
            targets: t,
        }),
        (Some((wa, ta)), Some((wb, tb))) => {
            let w = wa + wb;
            let targets = ta
                .iter()
                .zip(&tb)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (wa * x + wb * y) / w).collect())
                .collect();
            Some(BlockPull {
                weight: w,
                center,
                targets,
            })
        }
    }
}

fn joint_sweeps(
    fit: &Fit<'_>,
    joint: &JointConfig,
    lambdas: &[f64],
    models: &mut [Forecaster],
    cache: &mut [Vec<Forecast>],
    records: &mut Vec<StageRecord>,
) -> Result<()> {
    let data = fit.data;
    let config = fit.config;
    let n = data.graph.n();
    let center = config.outputs.center_row();
    let losses: Vec<DataLoss> = (0..n).map(|i| config.loss_for(&data.graph, i)).collect();
    let mut prev = coherency_objective(data, cache, lambdas, &config.outputs, &losses, data.split.train.clone())?;
    for _ in 0..joint.max_sweeps {
        for i in 0..n {
            let Some(pull) = block_pull(data, i, center, lambdas, cache) else {
                continue;
            };
            let (m, rec) = fit.run(i, models[i].clone(), Some(&pull), None, &config.optimizer, Stage::Joint)?;
            cache[i] = forecast_node(&m, &data.nodes[i]);
            models[i] = m;
            records.push(rec);
        }
        let cur = coherency_objective(data, cache, lambdas, &config.outputs, &losses, data.split.train.clone())?;
        let settled = (prev - cur).abs() <= joint.tol * cur.abs().max(1.0);
        prev = cur;
        if settled {
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SplitFractions, TimeSeriesPanel};
    use crate::hierarchy::{Edge, HierarchyGraph};
    use crate::models::Solver;
    use std::sync::Arc;

    fn small_panel() -> TimeSeriesPanel {
        let g = Arc::new(HierarchyGraph::balanced(&[2, 2]).unwrap());
        let bottom: Vec<Vec<f64>> = (0..4)
            .map(|k| {
                (0..120)
                    .map(|t| {
                        let t = t as f64;
                        10.0 + (k as f64 + 1.0) * (0.3 * t + k as f64).sin() + 0.1 * ((7.0 * t + k as f64).cos())
                    })
                    .collect()
            })
            .collect();
        TimeSeriesPanel::from_bottom(g, bottom, None).unwrap()
    }

    fn linear_config(lambda: LambdaSchedule) -> SharqConfig {
        SharqConfig {
            model: ModelKind::LinearAr,
            outputs: OutputSpec::Quantiles(DEFAULT_QUANTILES.to_vec()),
            lambda,
            optimizer: OptimizerConfig {
                epochs: 30,
                learning_rate: 0.01,
                batch_size: 16,
                seed: 5,
                solver: Solver::GradientDescent,
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_lambda_matches_base() {
        let ds = HierarchicalDataset::build(&small_panel(), 4, 2, SplitFractions::default(), true).unwrap();
        let cfg = linear_config(LambdaSchedule::zero());
        let base = train_base(&ds, &cfg).unwrap();
        let state = train_sharq(&ds, &cfg).unwrap();
        assert_eq!(state.models, base.models);
    }

    #[test]
    fn order_and_threads_do_not_matter() {
        let ds = HierarchicalDataset::build(&small_panel(), 4, 2, SplitFractions::default(), true).unwrap();
        let cfg = linear_config(LambdaSchedule::default());
        let a = train_sharq(&ds, &cfg).unwrap();
        let b = train_sharq(
            &ds,
            &SharqConfig {
                parallel: false,
                reverse_level_order: true,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(a.models, b.models);
        assert_eq!(a.var_eps, b.var_eps);
        assert!(a.var_eps[0].unwrap() >= 0.0);
        assert_eq!(a.stages[0], Stage::QuantileRecon);
        assert_eq!(a.stages[6], Stage::Leaf);
    }

    #[test]
    fn large_lambda_tracks_single_child() {
        let g = Arc::new(HierarchyGraph::from_edges(&[Edge::new("P", "C")]).unwrap());
        let child: Vec<f64> = (0..200).map(|t| 5.0 + (0.2 * t as f64).sin()).collect();
        // parent observations deliberately incoherent
        let parent: Vec<f64> = child.iter().enumerate().map(|(t, c)| c + (0.5 * t as f64).cos()).collect();
        let panel = TimeSeriesPanel::new(g, vec![parent, child], None).unwrap();
        let ds = HierarchicalDataset::build(&panel, 3, 1, SplitFractions::default(), true).unwrap();
        let cfg = SharqConfig {
            model: ModelKind::LinearAr,
            outputs: OutputSpec::Mean,
            lambda: LambdaSchedule::Constant(100.0),
            data_loss: DataLoss::MseMean,
            optimizer: OptimizerConfig {
                epochs: 1,
                learning_rate: 0.0,
                batch_size: 0,
                seed: 0,
                solver: Solver::Exact,
            },
            ..Default::default()
        };
        let state = train_sharq(&ds, &cfg).unwrap();
        let base = train_base(&ds, &SharqConfig { lambda: LambdaSchedule::zero(), ..cfg.clone() }).unwrap();

        // least-squares fit of the child forecast on the parent's features
        let train = ds.split.train.clone();
        let nf = ds.nodes[0].n_features;
        let x = nalgebra::DMatrix::from_fn(train.len(), nf + 1, |r, c| {
            if c < nf { ds.nodes[0].inputs[train.start + r][c] } else { 1.0 }
        });
        let norm_p = ds.nodes[0].normalization;
        let child_in_parent = |s: usize| {
            norm_p.normalize(state.models[1].forward_original(&ds.nodes[1].inputs[s]).unwrap().get(0, 0))
        };
        let c = nalgebra::DVector::from_fn(train.len(), |r, _| child_in_parent(train.start + r));
        let w = x.clone().svd(true, true).solve(&c, 1e-14).unwrap();

        let lambda = 100.0;
        let mut max_gap: f64 = 0.0;
        for s in ds.split.test.clone() {
            let xs = &ds.nodes[0].inputs[s];
            let oracle = (0..nf).map(|f| w[f] * xs[f]).sum::<f64>() + w[nf];
            let g_base = base.models[0].forward(xs).unwrap().get(0, 0);
            let g = state.models[0].forward(xs).unwrap().get(0, 0);
            let expect = (g_base + lambda * oracle) / (1.0 + lambda);
            assert!((g - expect).abs() < 1e-8, "{g} vs {expect}");
            max_gap = max_gap.max((g - oracle).abs() / (g_base - oracle).abs().max(1e-12));
        }
        assert!(max_gap < 1.0 / (1.0 + lambda) + 1e-6);
    }
}
