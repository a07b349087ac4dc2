//! Shared base forecasts, reconciliation baselines and evaluation.

use std::collections::BTreeMap;
use std::ops::Range;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sharq_core::data::{HierarchicalDataset, TimeSeriesPanel};
use sharq_core::hierarchy::{build_summing_matrix, reconciliation_error, SummingMatrix};
use sharq_core::metrics::{
    crps_from_samples, likelihood_ratio, mape, mape_with_epsilon, trivial_quantiles, EvaluationReport, NodeMetrics,
};
use sharq_core::models::{Forecast, Forecaster};
use sharq_core::reconcile::{
    apply_map_horizons, bottom_up_map, erm_map, gls_map, mint_map, BaseForecastErrors, ErmConfig, ErmSolver, Method,
    MintWeighting, ReconciliationMap, Shrinkage,
};
use sharq_core::sharq::{calibrate_non_crossing, train_base, train_sharq, QuantileForecastSet};

use crate::config::{MethodName, RunConfig};
use crate::io::{ForecastTable, History, Provenance};

/// A panel prepared for one run configuration.
pub struct Experiment {
    pub config: RunConfig,
    pub panel: TimeSeriesPanel,
    pub data: HierarchicalDataset,
    pub summing: SummingMatrix,
}

impl Experiment {
    pub fn new(panel: TimeSeriesPanel, config: RunConfig) -> Result<Self> {
        config.validate().map_err(|e| anyhow!("{e}"))?;
        let data = HierarchicalDataset::build(&panel, config.window, config.horizon, config.split, config.normalize)
            .context("building windowed dataset")?;
        let summing = build_summing_matrix(&data.graph);
        Ok(Experiment {
            config,
            panel,
            data,
            summing,
        })
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.config.hash(),
            seed: self.config.seed,
        }
    }

    /// One past the last observation any training sample touches.
    pub fn fit_end(&self) -> usize {
        self.data.split.train.end + self.data.window + self.data.horizon - 1
    }

    pub fn origins(&self, samples: Range<usize>) -> Vec<usize> {
        samples.map(|s| self.data.nodes[0].origins[s]).collect()
    }

    pub fn center_row(&self) -> usize {
        self.config.outputs().center_row()
    }
}

/// `cache[sample][node]`, original units.
pub type ForecastCache = Vec<Vec<Forecast>>;

pub fn forecast_cache(models: &[Forecaster], data: &HierarchicalDataset) -> Result<ForecastCache> {
    (0..data.n_samples())
        .map(|s| {
            models
                .iter()
                .zip(&data.nodes)
                .map(|(m, d)| m.forward_original(&d.inputs[s]).map_err(Into::into))
                .collect()
        })
        .collect()
}

pub fn cache_checksum(cache: &ForecastCache) -> String {
    let mut h = Sha256::new();
    for per_node in cache {
        for f in per_node {
            for v in &f.values {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// One-step center-row errors over `samples`, `n x T`.
pub fn one_step_errors(exp: &Experiment, cache: &ForecastCache, samples: Range<usize>) -> BaseForecastErrors {
    let center = exp.center_row();
    let n = exp.data.graph.n();
    let residuals = DMatrix::from_fn(n, samples.len(), |i, t| {
        let s = samples.start + t;
        cache[s][i].get(center, 0) - exp.data.nodes[i].target_original(s)[0]
    });
    BaseForecastErrors {
        residuals,
        source: format!("one-step errors on samples {samples:?}"),
    }
}

/// Center-row forecasts and targets over `samples` and every horizon, with
/// the `(origin, horizon)` key of each column.
pub fn history(exp: &Experiment, cache: &ForecastCache, samples: Range<usize>) -> (Vec<(usize, usize)>, History) {
    let center = exp.center_row();
    let h = exp.data.horizon;
    let n = exp.data.graph.n();
    let cols: Vec<(usize, usize)> = samples.flat_map(|s| (0..h).map(move |j| (s, j))).collect();
    let forecasts = DMatrix::from_fn(n, cols.len(), |i, c| cache[cols[c].0][i].get(center, cols[c].1));
    let targets = DMatrix::from_fn(n, cols.len(), |i, c| exp.data.nodes[i].target_original(cols[c].0)[cols[c].1]);
    let keys = cols.iter().map(|&(s, j)| (exp.data.nodes[0].origins[s], j)).collect();
    (keys, History { forecasts, targets })
}

pub fn needs_errors(method: Method) -> bool {
    matches!(method, Method::Gls | Method::MintSam | Method::MintShr)
}

/// GLS uses the diagonal of the sample error covariance.
pub fn build_map(
    method: Method,
    s: &SummingMatrix,
    errors: Option<&BaseForecastErrors>,
    history: Option<&History>,
    shrinkage: Shrinkage,
    erm_ridge: f64,
) -> Result<ReconciliationMap> {
    fn need(e: Option<&BaseForecastErrors>, method: Method) -> Result<&BaseForecastErrors> {
        e.ok_or_else(|| anyhow!("{method} needs base forecast residuals"))
    }
    let map = match method {
        Method::Base => ReconciliationMap::base(s),
        Method::Bu => bottom_up_map(s),
        Method::Gls => {
            let ws = need(errors, method)?.sample_covariance();
            gls_map(s, &DMatrix::from_diagonal(&ws.diagonal()))?
        }
        Method::MintSam => mint_map(s, Some(need(errors, method)?), MintWeighting::Sample)?,
        Method::MintShr => mint_map(s, Some(need(errors, method)?), MintWeighting::Shrinkage(shrinkage))?,
        Method::MintOls => mint_map(s, None, MintWeighting::Ols)?,
        Method::Erm => {
            let h = history.ok_or_else(|| anyhow!("erm needs held-out forecasts and targets"))?;
            erm_map(
                s,
                &h.forecasts,
                &h.targets,
                ErmConfig {
                    ridge: erm_ridge,
                    solver: ErmSolver::Direct,
                },
            )?
        }
    };
    Ok(map)
}

/// Applies `map` to every output row of a per-node forecast.
pub fn reconcile_forecasts(map: &ReconciliationMap, per_node: &[Forecast]) -> Result<Vec<Forecast>> {
    let Some(first) = per_node.first() else {
        return Ok(Vec::new());
    };
    let (rows, h) = (first.rows, first.horizon);
    let mut out: Vec<Forecast> = per_node.iter().map(|_| Forecast::zeros(rows, h)).collect();
    for r in 0..rows {
        let y: Vec<Vec<f64>> = per_node.iter().map(|f| f.row(r).to_vec()).collect();
        let rec = apply_map_horizons(map, &y)?;
        for (f, v) in out.iter_mut().zip(rec) {
            for (j, x) in v.into_iter().enumerate() {
                *f.get_mut(r, j) = x;
            }
        }
    }
    Ok(out)
}

/// Metrics of every table on its origins. MAPE and coherency use the raw
/// center row; LR and CRPS use the non-crossing quantiles.
pub fn evaluate(exp: &Experiment, tables: &[ForecastTable], mape_epsilon: Option<f64>) -> Result<EvaluationReport> {
    let g = &exp.data.graph;
    let n = g.n();
    let fit_end = exp.fit_end();
    let mut nodes = Vec::new();
    let mut coherency = BTreeMap::new();
    for t in tables {
        let h = t.horizon();
        let center = t.center_row();
        if t.values.iter().any(|v| v.len() != n) {
            bail!("{}: forecasts for {} nodes expected", t.method, n);
        }
        if let Some(&o) = t.origins.iter().max() {
            if o + h >= exp.panel.len() {
                bail!("{}: origin {o} + horizon {h} runs past the panel", t.method);
            }
        }
        let calibrated: Option<Vec<QuantileForecastSet>> = match &t.taus {
            None => None,
            Some(taus) => Some(
                t.values
                    .iter()
                    .map(|per_node| QuantileForecastSet::from_forecasts(taus.clone(), per_node).map(|q| calibrate_non_crossing(&q)))
                    .collect::<sharq_core::Result<_>>()?,
            ),
        };
        for i in 0..n {
            let series = exp.panel.series(i);
            let mut y = Vec::new();
            let mut point = Vec::new();
            let mut quant: Vec<Vec<f64>> = Vec::new();
            for (k, &o) in t.origins.iter().enumerate() {
                for j in 0..h {
                    y.push(series[o + j + 1]);
                    point.push(t.values[k][i].get(center, j));
                    if let Some(c) = &calibrated {
                        quant.push(c[k].values[i].iter().map(|row| row[j]).collect());
                    }
                }
            }
            let m = match mape_epsilon {
                Some(eps) => mape_with_epsilon(&y, &point, eps),
                None => mape(&y, &point),
            }
            .with_context(|| format!("{} MAPE at {}", t.method, g.id(i)))?;
            let (lr, crps) = match &t.taus {
                None => (None, None),
                Some(taus) => {
                    let trivial = trivial_quantiles(&series[..fit_end.min(series.len())], taus)?;
                    let lr = likelihood_ratio(&y, &quant, &trivial, taus).ok();
                    let crps = quant.iter().zip(&y).map(|(q, &v)| crps_from_samples(q, v)).sum::<f64>() / y.len() as f64;
                    (lr, Some(crps))
                }
            };
            nodes.push(NodeMetrics {
                node: g.id(i).to_string(),
                level: g.level(i),
                method: t.method.clone(),
                mape: m,
                lr,
                crps,
            });
        }
        let mut total = 0.0;
        for per_node in &t.values {
            let rows: Vec<Vec<f64>> = per_node.iter().map(|f| f.row(center).to_vec()).collect();
            total += reconciliation_error(g, &rows)?;
        }
        coherency.insert(t.method.clone(), total / t.values.len().max(1) as f64);
    }
    let prov = exp.provenance();
    Ok(EvaluationReport {
        horizon: exp.data.horizon,
        seed: prov.seed,
        config_hash: prov.config_hash,
        nodes,
        reconciliation_error: coherency,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: String,
    pub train_secs: f64,
    pub inference_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodFailure {
    pub method: String,
    pub error: String,
}

pub struct BenchmarkOutcome {
    pub report: EvaluationReport,
    pub tables: Vec<ForecastTable>,
    pub timings: Vec<MethodTiming>,
    pub failures: Vec<MethodFailure>,
    pub base_checksum: String,
}

fn table(exp: &Experiment, method: &str, samples: Range<usize>, values: Vec<Vec<Forecast>>) -> ForecastTable {
    ForecastTable {
        method: method.to_string(),
        taus: exp.config.quantiles.clone(),
        origins: exp.origins(samples),
        values,
    }
}

/// Trains shared base models once, runs every configured method on the same
/// base forecasts and evaluates them on the test origins. A failing method
/// is recorded and skipped.
pub fn run_benchmark(exp: &Experiment) -> Result<BenchmarkOutcome> {
    let cfg = &exp.config;
    let sc = cfg.sharq();
    let split = exp.data.split.clone();

    let clock = Instant::now();
    let base = train_base(&exp.data, &sc).context("training base models")?;
    let base_secs = clock.elapsed().as_secs_f64();
    let cache = forecast_cache(&base.models, &exp.data)?;
    let base_checksum = cache_checksum(&cache);
    log::info!("base models trained in {base_secs:.3}s");

    let mut methods: Vec<MethodName> = Vec::new();
    for m in &cfg.methods {
        if !methods.contains(m) {
            methods.push(*m);
        }
    }
    let shrinkage = Shrinkage::Auto;
    let mut tables = Vec::new();
    let mut timings = Vec::new();
    let mut failures = Vec::new();
    for method in methods {
        let name = method.as_str();
        let run = || -> Result<(ForecastTable, MethodTiming)> {
            match method {
                MethodName::Reconcile(m) => {
                    let clock = Instant::now();
                    let errors = needs_errors(m).then(|| one_step_errors(exp, &cache, split.train.clone()));
                    let hist = (m == Method::Erm).then(|| history(exp, &cache, split.valid.clone()).1);
                    let map = build_map(m, &exp.summing, errors.as_ref(), hist.as_ref(), shrinkage, cfg.erm_ridge)?;
                    let values = split
                        .test
                        .clone()
                        .map(|s| reconcile_forecasts(&map, &cache[s]))
                        .collect::<Result<Vec<_>>>()?;
                    let timing = MethodTiming {
                        method: name.into(),
                        train_secs: base_secs,
                        inference_secs: clock.elapsed().as_secs_f64(),
                    };
                    Ok((table(exp, name, split.test.clone(), values), timing))
                }
                MethodName::Sharq => {
                    let clock = Instant::now();
                    let state = train_sharq(&exp.data, &sc)?;
                    let train_secs = clock.elapsed().as_secs_f64();
                    let clock = Instant::now();
                    let values = split
                        .test
                        .clone()
                        .map(|s| state.forecast(&exp.data, s))
                        .collect::<sharq_core::Result<Vec<_>>>()?;
                    let timing = MethodTiming {
                        method: name.into(),
                        train_secs,
                        inference_secs: clock.elapsed().as_secs_f64(),
                    };
                    Ok((table(exp, name, split.test.clone(), values), timing))
                }
            }
        };
        let result = run();
        if cache_checksum(&cache) != base_checksum {
            bail!("base forecasts changed while running {name}");
        }
        match result {
            Ok((t, timing)) => {
                log::info!("{name}: done in {:.3}s", timing.train_secs + timing.inference_secs);
                tables.push(t);
                timings.push(timing);
            }
            Err(e) => {
                log::error!("{name} failed: {e:#}");
                failures.push(MethodFailure {
                    method: name.into(),
                    error: format!("{e:#}"),
                });
            }
        }
    }
    let report = evaluate(exp, &tables, cfg.mape_epsilon)?;
    Ok(BenchmarkOutcome {
        report,
        tables,
        timings,
        failures,
        base_checksum,
    })
}
