use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sharq_core::data::TimeSeriesPanel;
use sharq_core::hierarchy::{build_summing_matrix, HierarchyGraph};
use sharq_core::models::{Checkpoint, Forecaster};
use sharq_core::reconcile::{Method, Shrinkage};
use sharq_core::sharq::{train_base, train_sharq, Stage, StageRecord};
use sharq_core::simulate::{simulate_hierarchy, simulate_quantile_sequence, SequenceKind, SimConfig};

use clap::ValueEnum;

use crate::cli::*;
use crate::config::{canonical_json, sha256_hex, RunConfig};
use crate::io::{
    create, file_sha256, read_forecasts, read_history, read_residuals, write_forecasts, write_history, write_json,
    write_residuals, ForecastTable, Provenance,
};
use crate::pipeline::{
    build_map, evaluate, forecast_cache, history, needs_errors, one_step_errors, reconcile_forecasts, run_benchmark,
    Experiment, MethodFailure, MethodTiming,
};
use crate::CliError;

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg_path = cli.config.as_ref();
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Simulate(a) => simulate(a, cli.seed.unwrap_or(0), out),
        Command::Train(a) => train(a, a.run.resolve(cfg_path, cli.seed)?, out),
        Command::Forecast(a) => forecast(a, a.run.resolve(cfg_path, cli.seed)?, out),
        Command::Reconcile(a) => reconcile(a, cfg_path, out),
        Command::Evaluate(a) => evaluate_cmd(a, a.run.resolve(cfg_path, cli.seed)?, out),
        Command::Benchmark(a) => {
            let cfg = a.run.resolve(a.manifest.as_ref().or(cfg_path), cli.seed)?;
            benchmark(cfg, out)
        }
    }
}

fn write_csv_with(path: &Path, prov: &Provenance, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    prov.write_comment(&mut w)?;
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SimManifest<'a, T: Serialize> {
    config_hash: String,
    seed: u64,
    preset: &'a str,
    config: T,
    outputs: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct SequenceConfig {
    kind: SequenceKind,
    length: usize,
    seed: u64,
}

fn simulate(a: &SimulateArgs, seed: u64, out: &Path) -> Result<(), CliError> {
    let preset = a.preset.to_possible_value().unwrap().get_name().to_string();
    let mut outputs = BTreeMap::new();
    let mut record = |name: &str| -> Result<()> {
        outputs.insert(name.to_string(), file_sha256(&out.join(name))?);
        Ok(())
    };
    let kind = match a.preset {
        SimPreset::SmallUnbiased | SimPreset::LargeUnbiased => None,
        SimPreset::LognormalSine => Some(SequenceKind::LognormalSine),
        SimPreset::GammaStep => Some(SequenceKind::GammaStep),
        SimPreset::GaussianStep => Some(SequenceKind::GaussianStep),
    };
    let length = a.length.unwrap_or(500);
    let (config_json, panel) = match kind {
        None => {
            let mut c = if a.preset == SimPreset::SmallUnbiased {
                SimConfig::small(seed)
            } else {
                SimConfig::large(seed)
            };
            c.length = length;
            let sim = simulate_hierarchy(&c).map_err(|e| CliError::Usage(e.to_string()))?;
            (serde_json::to_value(&c).map_err(anyhow::Error::from)?, sim.panel)
        }
        Some(kind) => {
            let c = SequenceConfig { kind, length, seed };
            let seq = simulate_quantile_sequence(kind, length, seed).map_err(|e| CliError::Usage(e.to_string()))?;
            let graph = Arc::new(HierarchyGraph::single("y"));
            let panel = TimeSeriesPanel::new(graph, vec![seq.values.clone()], None)?;
            let prov = Provenance {
                config_hash: sha256_hex(canonical_json(&c).as_bytes()),
                seed,
            };
            write_csv_with(&out.join("components.csv"), &prov, |w| {
                let mut w = csv::Writer::from_writer(w);
                w.write_record(["timestamp", "signal", "noise", "value"])?;
                for (t, ts) in panel.timestamps().iter().enumerate() {
                    w.write_record([
                        ts.as_str(),
                        &seq.signal[t].to_string(),
                        &seq.noise[t].to_string(),
                        &seq.values[t].to_string(),
                    ])?;
                }
                w.flush()?;
                Ok(())
            })?;
            record("components.csv")?;
            (serde_json::to_value(&c).map_err(anyhow::Error::from)?, panel)
        }
    };
    let prov = Provenance {
        config_hash: sha256_hex(canonical_json(&config_json).as_bytes()),
        seed,
    };
    write_csv_with(&out.join("hierarchy.csv"), &prov, |w| Ok(panel.graph().write_csv(w)?))?;
    write_csv_with(&out.join("panel.csv"), &prov, |w| Ok(panel.write_csv(w)?))?;
    record("hierarchy.csv")?;
    record("panel.csv")?;
    write_json(
        &out.join("manifest.json"),
        &SimManifest {
            config_hash: prov.config_hash.clone(),
            seed,
            preset: &preset,
            config: config_json,
            outputs,
        },
    )?;
    log::info!("simulated {} series of length {} into {}", panel.graph().n(), panel.len(), out.display());
    Ok(())
}

fn load_experiment(cfg: RunConfig) -> Result<Experiment, CliError> {
    let (Some(h), Some(p)) = (&cfg.hierarchy, &cfg.panel) else {
        return Err(CliError::Usage("--hierarchy and --panel (or a config naming them) are required".into()));
    };
    let graph = Arc::new(HierarchyGraph::from_csv_path(h).with_context(|| format!("reading {}", h.display()))?);
    let panel =
        TimeSeriesPanel::from_csv_path(p, graph, cfg.aggregate).with_context(|| format!("reading {}", p.display()))?;
    Ok(Experiment::new(panel, cfg)?)
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config_hash: String,
    seed: u64,
    #[serde(flatten)]
    checkpoint: Checkpoint,
}

#[derive(Serialize, Deserialize)]
struct TrainManifest {
    config_hash: String,
    seed: u64,
    method: String,
    config: RunConfig,
    stages: Vec<Stage>,
    lambdas: BTreeMap<String, f64>,
    /// Per aggregate node, original units.
    var_eps: BTreeMap<String, f64>,
    records: Vec<StageRecord>,
    checkpoints: Vec<String>,
}

fn checkpoint_name(i: usize, id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    format!("{i:04}_{safe}.json")
}

fn train(a: &TrainArgs, cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    let exp = load_experiment(cfg)?;
    let g = &exp.data.graph;
    let sc = exp.config.sharq();
    let prov = exp.provenance();
    let (method, models, stages, lambdas, var_eps, records) = if a.base {
        let base = train_base(&exp.data, &sc)?;
        let records = base
            .reports
            .iter()
            .enumerate()
            .map(|(i, r)| StageRecord {
                node: g.id(i).to_string(),
                stage: Stage::Leaf,
                epochs: r.epoch_losses.len(),
                final_loss: r.final_loss(),
            })
            .collect();
        ("base", base.models, Vec::new(), BTreeMap::new(), BTreeMap::new(), records)
    } else {
        let state = train_sharq(&exp.data, &sc)?;
        let lambdas = (0..g.n()).map(|i| (g.id(i).to_string(), state.lambdas[i])).collect();
        let var_eps = (0..g.n())
            .filter_map(|i| state.var_eps_original(i).map(|v| (g.id(i).to_string(), v)))
            .collect();
        ("sharq", state.models.clone(), state.stages.clone(), lambdas, var_eps, state.records.clone())
    };
    let dir = out.join("checkpoints");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut names = Vec::new();
    for (i, m) in models.into_iter().enumerate() {
        let name = checkpoint_name(i, g.id(i));
        let file = CheckpointFile {
            config_hash: prov.config_hash.clone(),
            seed: prov.seed,
            checkpoint: Checkpoint {
                node: g.id(i).to_string(),
                model: m,
                training: Some(exp.config.optimizer()),
            },
        };
        write_json(&dir.join(&name), &file)?;
        names.push(name);
    }
    write_json(
        &out.join("train_manifest.json"),
        &TrainManifest {
            config_hash: prov.config_hash,
            seed: prov.seed,
            method: method.into(),
            config: exp.config.clone(),
            stages,
            lambdas,
            var_eps,
            records,
            checkpoints: names,
        },
    )?;
    log::info!("trained {} {method} models into {}", g.n(), dir.display());
    Ok(())
}

fn load_checkpoints(dir: &Path, graph: &HierarchyGraph) -> Result<Vec<Forecaster>> {
    let mut by_node: BTreeMap<usize, Forecaster> = BTreeMap::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    entries.sort();
    for path in entries {
        let file: CheckpointFile = serde_json::from_reader(BufReader::new(File::open(&path)?))
            .with_context(|| format!("parsing {}", path.display()))?;
        let ck = file.checkpoint;
        let i = graph
            .index_of(&ck.node)
            .ok_or_else(|| anyhow!("{}: node `{}` not in the hierarchy", path.display(), ck.node))?;
        let m = Forecaster::from_params(ck.model.spec, ck.model.params, ck.model.normalization)?;
        if by_node.insert(i, m).is_some() {
            bail!("two checkpoints for node `{}`", ck.node);
        }
    }
    if by_node.len() != graph.n() {
        let missing: Vec<&str> = (0..graph.n()).filter(|i| !by_node.contains_key(i)).map(|i| graph.id(i)).collect();
        bail!("no checkpoint for nodes {missing:?}");
    }
    Ok(by_node.into_values().collect())
}

fn forecast(a: &ForecastArgs, cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    let exp = load_experiment(cfg)?;
    let dir = a.checkpoints.clone().unwrap_or_else(|| out.join("checkpoints"));
    let models = load_checkpoints(&dir, &exp.data.graph)?;
    let label = match &a.label {
        Some(l) => l.clone(),
        None => dir
            .parent()
            .map(|p| p.join("train_manifest.json"))
            .filter(|p| p.exists())
            .map(|p| -> Result<String> {
                let m: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(&p)?))?;
                Ok(m["method"].as_str().unwrap_or("base").to_string())
            })
            .transpose()?
            .unwrap_or_else(|| "base".into()),
    };
    let cache = forecast_cache(&models, &exp.data)?;
    let split = &exp.data.split;
    let samples = match a.split {
        SplitArg::Train => split.train.clone(),
        SplitArg::Valid => split.valid.clone(),
        SplitArg::Test => split.test.clone(),
        SplitArg::All => 0..exp.data.n_samples(),
    };
    let prov = exp.provenance();
    let g = &exp.data.graph;
    let tables = [ForecastTable {
        method: label,
        taus: exp.config.quantiles.clone(),
        origins: exp.origins(samples.clone()),
        values: samples.map(|s| cache[s].clone()).collect(),
    }];
    write_forecasts(create(&out.join("forecasts.csv"))?, &prov, g, &tables)?;
    let errors = one_step_errors(&exp, &cache, split.train.clone());
    write_residuals(create(&out.join("residuals.csv"))?, &prov, g, &exp.origins(split.train.clone()), &errors)?;
    let (keys, hist) = history(&exp, &cache, split.valid.clone());
    write_history(create(&out.join("history.csv"))?, &prov, g, &keys, &hist)?;
    log::info!("wrote forecasts for {} origins to {}", tables[0].origins.len(), out.display());
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn reconcile(a: &ReconcileArgs, cfg_path: Option<&PathBuf>, out: &Path) -> Result<(), CliError> {
    let hierarchy = match (&a.hierarchy, cfg_path) {
        (Some(h), _) => h.clone(),
        (None, Some(c)) => RunConfig::load(c)?
            .hierarchy
            .ok_or_else(|| CliError::Usage("the config names no hierarchy".into()))?,
        (None, None) => return Err(CliError::Usage("--hierarchy is required".into())),
    };
    let graph = HierarchyGraph::from_csv_path(&hierarchy).with_context(|| format!("reading {}", hierarchy.display()))?;
    let s = build_summing_matrix(&graph);
    let mut tables = read_forecasts(open(&a.forecasts)?, &graph)?;
    let table = match &a.input_method {
        Some(m) => {
            let i = tables
                .iter()
                .position(|t| &t.method == m)
                .ok_or_else(|| CliError::Usage(format!("no forecasts for method `{m}`")))?;
            tables.swap_remove(i)
        }
        None if tables.len() == 1 => tables.pop().unwrap(),
        None => return Err(CliError::Usage("the forecast table holds several methods; pick one with --input-method".into())),
    };
    let errors = if needs_errors(a.method) {
        let p = a
            .residuals
            .as_ref()
            .ok_or_else(|| CliError::Usage(format!("{} needs --residuals", a.method)))?;
        Some(read_residuals(open(p)?, &graph)?)
    } else {
        None
    };
    let hist = if a.method == Method::Erm {
        let p = a
            .history
            .as_ref()
            .ok_or_else(|| CliError::Usage("erm needs --history".into()))?;
        Some(read_history(open(p)?, &graph)?)
    } else {
        None
    };
    let shrinkage = match a.shrinkage {
        ShrinkageArg::Auto => Shrinkage::Auto,
        ShrinkageArg::Fixed(v) => Shrinkage::Fixed(v),
    };
    let map = build_map(a.method, &s, errors.as_ref(), hist.as_ref(), shrinkage, a.erm_ridge)?;
    let values = table
        .values
        .iter()
        .map(|per_node| reconcile_forecasts(&map, per_node))
        .collect::<Result<Vec<_>>>()?;

    let mut inputs = BTreeMap::new();
    inputs.insert("forecasts", file_sha256(&a.forecasts)?);
    inputs.insert("hierarchy", file_sha256(&hierarchy)?);
    for (k, p) in [("residuals", &a.residuals), ("history", &a.history)] {
        if let Some(p) = p {
            inputs.insert(k, file_sha256(p)?);
        }
    }
    let settings = serde_json::json!({
        "method": a.method.as_str(),
        "input_method": table.method,
        "shrinkage": format!("{:?}", a.shrinkage),
        "erm_ridge": a.erm_ridge,
        "inputs": inputs,
    });
    let prov = Provenance {
        config_hash: sha256_hex(canonical_json(&settings).as_bytes()),
        seed: 0,
    };
    let result = ForecastTable {
        method: a.method.as_str().to_string(),
        values,
        ..table
    };
    let path = out.join(format!("reconciled_{}.csv", a.method));
    write_forecasts(create(&path)?, &prov, &graph, &[result])?;
    if let Some(p_out) = &a.p_out {
        write_csv_with(p_out, &prov, |w| Ok(map.write_p_csv(w, graph.ids())?))?;
    }
    log::info!("{} reconciled forecasts written to {}", a.method, path.display());
    Ok(())
}

fn write_report(out: &Path, prov: &Provenance, report: &sharq_core::metrics::EvaluationReport) -> Result<()> {
    write_json(&out.join("report.json"), report)?;
    write_csv_with(&out.join("report.csv"), prov, |w| Ok(report.write_csv(w)?))
}

fn evaluate_cmd(a: &EvaluateArgs, cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    if cfg.mape_epsilon.is_some() {
        log::warn!("MAPE denominators are floored by the configured epsilon; scores are not comparable to unfloored runs");
    }
    let exp = load_experiment(cfg)?;
    let mut tables = Vec::new();
    for p in &a.forecasts {
        tables.extend(read_forecasts(open(p)?, &exp.data.graph)?);
    }
    let report = evaluate(&exp, &tables, exp.config.mape_epsilon)?;
    write_report(out, &exp.provenance(), &report)?;
    log::info!("evaluated {} methods into {}", tables.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct Timings<'a> {
    config_hash: &'a str,
    seed: u64,
    methods: &'a [MethodTiming],
}

#[derive(Serialize)]
struct BenchmarkManifest<'a> {
    config_hash: &'a str,
    seed: u64,
    config: &'a RunConfig,
    inputs: BTreeMap<&'static str, String>,
    outputs: BTreeMap<&'static str, String>,
    base_checksum: &'a str,
    failures: &'a [MethodFailure],
}

fn benchmark(cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    if cfg.mape_epsilon.is_some() {
        log::warn!("MAPE denominators are floored by the configured epsilon; scores are not comparable to unfloored runs");
    }
    let exp = load_experiment(cfg)?;
    let prov = exp.provenance();
    let outcome = run_benchmark(&exp)?;
    let g = &exp.data.graph;
    write_report(out, &prov, &outcome.report)?;
    write_forecasts(create(&out.join("forecasts.csv"))?, &prov, g, &outcome.tables)?;
    write_json(
        &out.join("timings.json"),
        &Timings {
            config_hash: &prov.config_hash,
            seed: prov.seed,
            methods: &outcome.timings,
        },
    )?;
    let mut inputs = BTreeMap::new();
    for (k, p) in [("hierarchy", &exp.config.hierarchy), ("panel", &exp.config.panel)] {
        inputs.insert(k, file_sha256(p.as_ref().unwrap())?);
    }
    let mut outputs = BTreeMap::new();
    for k in ["report.json", "report.csv", "forecasts.csv"] {
        outputs.insert(k, file_sha256(&out.join(k))?);
    }
    write_json(
        &out.join("manifest.json"),
        &BenchmarkManifest {
            config_hash: &prov.config_hash,
            seed: prov.seed,
            config: &exp.config,
            inputs,
            outputs,
            base_checksum: &outcome.base_checksum,
            failures: &outcome.failures,
        },
    )?;
    for t in &outcome.timings {
        log::info!("{:>9}: train {:.3}s, inference {:.3}s", t.method, t.train_secs, t.inference_secs);
    }
    if !outcome.failures.is_empty() {
        let names: Vec<&str> = outcome.failures.iter().map(|f| f.method.as_str()).collect();
        return Err(CliError::Failed(format!("methods failed: {}", names.join(", "))));
    }
    Ok(())
}
