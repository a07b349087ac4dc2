//! Forecast, residual and history tables, plus output provenance.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::DMatrix;
use sharq_core::hierarchy::HierarchyGraph;
use sharq_core::models::Forecast;
use sharq_core::reconcile::BaseForecastErrors;

use crate::config::sha256_hex;

/// Embedded as a `#` comment line at the top of every CSV artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn write_comment<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# config_hash={} seed={}", self.config_hash, self.seed)
    }
}

pub fn reader_builder() -> csv::ReaderBuilder {
    let mut b = csv::ReaderBuilder::new();
    b.trim(csv::Trim::All).comment(Some(b'#'));
    b
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Forecasts of one method: `values[o][node]` for origin `origins[o]`, in
/// original units. `taus` is `None` for mean forecasts.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastTable {
    pub method: String,
    pub taus: Option<Vec<f64>>,
    pub origins: Vec<usize>,
    pub values: Vec<Vec<Forecast>>,
}

impl ForecastTable {
    pub fn rows(&self) -> usize {
        self.taus.as_ref().map_or(1, Vec::len)
    }

    pub fn center_row(&self) -> usize {
        match &self.taus {
            None => 0,
            Some(t) => t.iter().position(|&x| x == 0.5).unwrap_or(t.len() / 2),
        }
    }

    pub fn horizon(&self) -> usize {
        self.values.first().and_then(|v| v.first()).map_or(0, |f| f.horizon)
    }
}

fn tau_label(taus: &Option<Vec<f64>>, r: usize) -> String {
    match taus {
        None => "mean".into(),
        Some(t) => t[r].to_string(),
    }
}

/// `method,node,origin,tau,horizon,value`, horizon counted from 1.
pub fn write_forecasts<W: Write>(
    mut out: W,
    prov: &Provenance,
    graph: &HierarchyGraph,
    tables: &[ForecastTable],
) -> Result<()> {
    prov.write_comment(&mut out)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "node", "origin", "tau", "horizon", "value"])?;
    for t in tables {
        for (o, per_node) in t.origins.iter().zip(&t.values) {
            let origin = o.to_string();
            for (i, f) in per_node.iter().enumerate() {
                for r in 0..f.rows {
                    let tau = tau_label(&t.taus, r);
                    for j in 0..f.horizon {
                        w.write_record([
                            t.method.as_str(),
                            graph.id(i),
                            &origin,
                            &tau,
                            &(j + 1).to_string(),
                            &f.get(r, j).to_string(),
                        ])?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(s: &str, what: &str, line: u64) -> Result<T> {
    s.parse().map_err(|_| anyhow!("line {line}: bad {what} `{s}`"))
}

/// Inverse of [`write_forecasts`]. Every method must cover the same full
/// `(node, tau, horizon)` grid at each of its origins.
pub fn read_forecasts<R: Read>(reader: R, graph: &HierarchyGraph) -> Result<Vec<ForecastTable>> {
    type Cell = (usize, usize, usize, usize);
    let mut rdr = reader_builder().from_reader(reader);
    let mut order: Vec<String> = Vec::new();
    let mut cells: BTreeMap<String, (BTreeMap<Cell, f64>, Vec<String>)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 6 {
            bail!("line {line}: expected 6 fields");
        }
        let method = rec[0].to_string();
        let node = graph
            .index_of(&rec[1])
            .ok_or_else(|| anyhow!("line {line}: unknown node `{}`", &rec[1]))?;
        let origin: usize = parse(&rec[2], "origin", line)?;
        let horizon: usize = parse(&rec[4], "horizon", line)?;
        if horizon == 0 {
            bail!("line {line}: horizons start at 1");
        }
        let value: f64 = parse(&rec[5], "value", line)?;
        if !order.contains(&method) {
            order.push(method.clone());
        }
        let (map, taus) = cells.entry(method).or_default();
        let tau = rec[3].to_string();
        let r = match taus.iter().position(|t| *t == tau) {
            Some(r) => r,
            None => {
                taus.push(tau);
                taus.len() - 1
            }
        };
        if map.insert((origin, node, r, horizon - 1), value).is_some() {
            bail!("line {line}: duplicate forecast");
        }
    }
    let n = graph.n();
    order
        .into_iter()
        .map(|method| {
            let (map, labels) = cells.remove(&method).unwrap();
            let taus = if labels == ["mean"] {
                None
            } else {
                let t: Vec<f64> = labels.iter().map(|l| parse(l, "tau", 0)).collect::<Result<_>>()?;
                Some(t)
            };
            let mut sorted: Vec<usize> = (0..labels.len()).collect();
            if let Some(t) = &taus {
                sorted.sort_by(|&a, &b| t[a].total_cmp(&t[b]));
            }
            let rows = labels.len();
            let h = map.keys().map(|k| k.3 + 1).max().unwrap_or(0);
            let mut origins: Vec<usize> = map.keys().map(|k| k.0).collect();
            origins.dedup();
            if map.len() != origins.len() * n * rows * h {
                bail!("method `{method}`: incomplete forecast grid");
            }
            let values = origins
                .iter()
                .map(|&o| {
                    (0..n)
                        .map(|i| {
                            let mut f = Forecast::zeros(rows, h);
                            for (dst, &src) in sorted.iter().enumerate() {
                                for j in 0..h {
                                    *f.get_mut(dst, j) = map[&(o, i, src, j)];
                                }
                            }
                            f
                        })
                        .collect()
                })
                .collect();
            let taus = taus.map(|t| sorted.iter().map(|&r| t[r]).collect());
            Ok(ForecastTable {
                method,
                taus,
                origins,
                values,
            })
        })
        .collect()
}

/// `node,origin,value` one-step errors; origins must match across nodes.
pub fn write_residuals<W: Write>(
    mut out: W,
    prov: &Provenance,
    graph: &HierarchyGraph,
    origins: &[usize],
    errors: &BaseForecastErrors,
) -> Result<()> {
    prov.write_comment(&mut out)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["node", "origin", "value"])?;
    for i in 0..errors.n() {
        for (t, o) in origins.iter().enumerate() {
            w.write_record([graph.id(i), &o.to_string(), &errors.residuals[(i, t)].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_residuals<R: Read>(reader: R, graph: &HierarchyGraph) -> Result<BaseForecastErrors> {
    let mut rdr = reader_builder().from_reader(reader);
    let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let node = graph
            .index_of(&rec[0])
            .ok_or_else(|| anyhow!("line {line}: unknown node `{}`", &rec[0]))?;
        let origin: usize = parse(&rec[1], "origin", line)?;
        map.insert((origin, node), parse(&rec[2], "value", line)?);
    }
    let mut origins: Vec<usize> = map.keys().map(|k| k.0).collect();
    origins.dedup();
    let n = graph.n();
    if map.len() != origins.len() * n || origins.is_empty() {
        bail!("residuals must cover every node at every origin");
    }
    let residuals = DMatrix::from_fn(n, origins.len(), |i, t| map[&(origins[t], i)]);
    Ok(BaseForecastErrors {
        residuals,
        source: "residuals csv".into(),
    })
}

/// Held-out forecasts with their realised targets, `(forecasts, targets)`
/// as `n x N` matrices.
pub struct History {
    pub forecasts: DMatrix<f64>,
    pub targets: DMatrix<f64>,
}

/// `node,origin,horizon,forecast,target`.
pub fn write_history<W: Write>(
    mut out: W,
    prov: &Provenance,
    graph: &HierarchyGraph,
    keys: &[(usize, usize)],
    history: &History,
) -> Result<()> {
    prov.write_comment(&mut out)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["node", "origin", "horizon", "forecast", "target"])?;
    for i in 0..graph.n() {
        for (c, (o, j)) in keys.iter().enumerate() {
            w.write_record([
                graph.id(i),
                &o.to_string(),
                &(j + 1).to_string(),
                &history.forecasts[(i, c)].to_string(),
                &history.targets[(i, c)].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_history<R: Read>(reader: R, graph: &HierarchyGraph) -> Result<History> {
    let mut rdr = reader_builder().from_reader(reader);
    let mut map: BTreeMap<((usize, usize), usize), (f64, f64)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let node = graph
            .index_of(&rec[0])
            .ok_or_else(|| anyhow!("line {line}: unknown node `{}`", &rec[0]))?;
        let origin: usize = parse(&rec[1], "origin", line)?;
        let h: usize = parse(&rec[2], "horizon", line)?;
        let v = (parse(&rec[3], "forecast", line)?, parse(&rec[4], "target", line)?);
        map.insert(((origin, h), node), v);
    }
    let mut keys: Vec<(usize, usize)> = map.keys().map(|k| k.0).collect();
    keys.dedup();
    let n = graph.n();
    if map.len() != keys.len() * n || keys.is_empty() {
        bail!("history must cover every node at every (origin, horizon)");
    }
    Ok(History {
        forecasts: DMatrix::from_fn(n, keys.len(), |i, c| map[&(keys[c], i)].0),
        targets: DMatrix::from_fn(n, keys.len(), |i, c| map[&(keys[c], i)].1),
    })
}
