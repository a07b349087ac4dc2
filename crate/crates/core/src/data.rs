//! Aligned hierarchical panels, lag-window featurization and chronological
//! splits.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{build_summing_matrix, coherency_residual, HierarchyGraph};

/// Relative tolerance for the `coherent` flag.
pub const COHERENCY_TOLERANCE: f64 = 1e-9;

/// Observations for every node of a hierarchy on a shared time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesPanel {
    graph: Arc<HierarchyGraph>,
    values: Vec<Vec<f64>>,
    timestamps: Vec<String>,
    coherent: bool,
}

impl TimeSeriesPanel {
    /// `values[node]` in canonical node order, all of equal length.
    pub fn new(
        graph: Arc<HierarchyGraph>,
        values: Vec<Vec<f64>>,
        timestamps: Option<Vec<String>>,
    ) -> Result<Self> {
        if values.len() != graph.n() {
            return Err(Error::mismatch(graph.n(), values.len(), "panel rows"));
        }
        let t = values.first().map_or(0, Vec::len);
        if let Some(row) = values.iter().find(|r| r.len() != t) {
            return Err(Error::mismatch(t, row.len(), "panel columns"));
        }
        if let Some(v) = values.iter().flatten().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite observation {v}")));
        }
        let timestamps = match timestamps {
            Some(ts) if ts.len() != t => return Err(Error::mismatch(t, ts.len(), "timestamps")),
            Some(ts) => ts,
            None => default_timestamps(t),
        };
        let coherent = is_coherent(&graph, &values);
        Ok(TimeSeriesPanel {
            graph,
            values,
            timestamps,
            coherent,
        })
    }

    /// Builds a coherent panel from bottom series only, synthesising the
    /// aggregates through the summing matrix.
    pub fn from_bottom(
        graph: Arc<HierarchyGraph>,
        bottom: Vec<Vec<f64>>,
        timestamps: Option<Vec<String>>,
    ) -> Result<Self> {
        if bottom.len() != graph.m() {
            return Err(Error::mismatch(graph.m(), bottom.len(), "bottom series"));
        }
        let t = bottom.first().map_or(0, Vec::len);
        let s = build_summing_matrix(&graph);
        let mut values = vec![vec![0.0; t]; graph.n()];
        let k = graph.k();
        for (j, row) in bottom.iter().enumerate() {
            if row.len() != t {
                return Err(Error::mismatch(t, row.len(), "bottom series length"));
            }
            values[k + j].clone_from(row);
        }
        for i in graph.aggregates() {
            for (j, row) in bottom.iter().enumerate() {
                let w = s.matrix()[(i, j)];
                if w != 0.0 {
                    for (acc, &v) in values[i].iter_mut().zip(row) {
                        *acc += w * v;
                    }
                }
            }
        }
        let mut panel = Self::new(graph, values, timestamps)?;
        panel.coherent = true;
        Ok(panel)
    }

    pub fn graph(&self) -> &HierarchyGraph {
        &self.graph
    }

    pub fn graph_arc(&self) -> Arc<HierarchyGraph> {
        Arc::clone(&self.graph)
    }

    pub fn series(&self, node: usize) -> &[f64] {
        &self.values[node]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn timestamps(&self) -> &[String] {
        &self.timestamps
    }

    /// Number of time points `T`.
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn is_coherent(&self) -> bool {
        self.coherent
    }

    /// Values of every node at time `t`.
    pub fn column(&self, t: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[t]).collect()
    }

    /// Reads the long-format `series_id,timestamp,value` CSV. With `aggregate`
    /// only bottom series are read and aggregates are synthesised.
    pub fn read_csv<R: Read>(reader: R, graph: Arc<HierarchyGraph>, aggregate: bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::InvalidParameter(format!("panel csv missing `{name}` column")))
        };
        let (ic, tc, vc) = (col("series_id")?, col("timestamp")?, col("value")?);

        let mut per_node: Vec<HashMap<String, f64>> = vec![HashMap::new(); graph.n()];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let id = rec.get(ic).unwrap_or("");
            let ts = rec.get(tc).unwrap_or("");
            let raw = rec.get(vc).unwrap_or("");
            let node = graph
                .index_of(id)
                .ok_or_else(|| Error::UnknownNode(id.to_string()))?;
            let value: f64 = raw.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                Error::NonNumeric {
                    value: raw.to_string(),
                    line: line + 2,
                }
            })?;
            if aggregate && !graph.is_bottom(node) {
                log::warn!("ignoring aggregate series `{id}`; it is rebuilt from bottom series");
                continue;
            }
            if per_node[node].insert(ts.to_string(), value).is_some() {
                return Err(Error::DuplicateObservation {
                    series: id.to_string(),
                    timestamp: ts.to_string(),
                });
            }
        }

        let required: Vec<usize> = if aggregate {
            graph.bottoms().collect()
        } else {
            (0..graph.n()).collect()
        };
        for &i in &required {
            if per_node[i].is_empty() {
                return Err(Error::MissingSeries(graph.id(i).to_string()));
            }
        }
        let mut shared: BTreeSet<&String> = per_node[required[0]].keys().collect();
        for &i in &required[1..] {
            shared.retain(|ts| per_node[i].contains_key(*ts));
        }
        if shared.is_empty() {
            return Err(Error::EmptyIntersection);
        }
        let timestamps = sort_timestamps(shared.into_iter().cloned().collect());

        let row = |i: usize| -> Vec<f64> { timestamps.iter().map(|ts| per_node[i][ts]).collect() };
        if aggregate {
            let bottom = graph.bottoms().map(row).collect();
            Self::from_bottom(graph, bottom, Some(timestamps))
        } else {
            let values = (0..graph.n()).map(row).collect();
            Self::new(graph, values, Some(timestamps))
        }
    }

    pub fn from_csv_path(path: impl AsRef<Path>, graph: Arc<HierarchyGraph>, aggregate: bool) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, graph, aggregate)
    }

    /// Writes the long format, sorted by `(series_id, timestamp)`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["series_id", "timestamp", "value"])?;
        let mut order: Vec<usize> = (0..self.graph.n()).collect();
        order.sort_by(|&a, &b| self.graph.id(a).cmp(self.graph.id(b)));
        for i in order {
            for (ts, v) in self.timestamps.iter().zip(&self.values[i]) {
                w.write_record([self.graph.id(i), ts.as_str(), &format!("{v}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Zero-padded integer labels, which sort the same lexicographically and
/// numerically.
pub fn default_timestamps(t: usize) -> Vec<String> {
    let width = t.saturating_sub(1).to_string().len().max(4);
    (0..t).map(|i| format!("{i:0width$}")).collect()
}

fn sort_timestamps(mut ts: Vec<String>) -> Vec<String> {
    if ts.iter().all(|s| s.parse::<i64>().is_ok()) {
        ts.sort_by_key(|s| s.parse::<i64>().unwrap());
    } else {
        ts.sort();
    }
    ts
}

fn is_coherent(graph: &HierarchyGraph, values: &[Vec<f64>]) -> bool {
    if graph.k() == 0 {
        return true;
    }
    let t = values.first().map_or(0, Vec::len);
    (0..t).all(|c| {
        let col: Vec<f64> = values.iter().map(|r| r[c]).collect();
        let scale = col.iter().map(|v| v.abs()).fold(1.0, f64::max);
        coherency_residual(graph, &col)
            .map(|r| r.iter().all(|x| x.abs() <= COHERENCY_TOLERANCE * scale))
            .unwrap_or(false)
    })
}

/// Per-node affine standardisation `(x - shift) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: f64,
    pub scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization::IDENTITY
    }
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        shift: 0.0,
        scale: 1.0,
    };
    pub const SCALE_FLOOR: f64 = 1e-8;

    /// Mean and population standard deviation of `values`, with the scale
    /// floored at [`Self::SCALE_FLOOR`].
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::IDENTITY;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Normalization {
            shift: mean,
            scale: var.sqrt().max(Self::SCALE_FLOOR),
        }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.shift) / self.scale
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.scale + self.shift
    }
}

/// How lag windows become features. Only raw lags are supported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    #[default]
    Identity,
}

/// Supervised samples for one node: `X_m = [x(m), ..., x(m-w+1)]`,
/// `Y_m = [x(m+1), ..., x(m+h)]`, both in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub node: usize,
    pub window: usize,
    pub horizon: usize,
    pub n_features: usize,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    /// Time index `m` of each sample's most recent input.
    pub origins: Vec<usize>,
    pub normalization: Normalization,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Samples in `range`, keeping origins and normalization.
    pub fn slice(&self, range: Range<usize>) -> WindowedDataset {
        WindowedDataset {
            node: self.node,
            window: self.window,
            horizon: self.horizon,
            n_features: self.n_features,
            inputs: self.inputs[range.clone()].to_vec(),
            targets: self.targets[range.clone()].to_vec(),
            origins: self.origins[range].to_vec(),
            normalization: self.normalization,
        }
    }

    /// Target of sample `s` in original units.
    pub fn target_original(&self, s: usize) -> Vec<f64> {
        self.targets[s]
            .iter()
            .map(|&z| self.normalization.denormalize(z))
            .collect()
    }
}

/// Lag-window samples of one series after applying `norm`.
pub fn featurize_series(
    series: &[f64],
    window: usize,
    horizon: usize,
    mode: FeatureMode,
    norm: Normalization,
) -> Result<WindowedDataset> {
    if window == 0 || horizon == 0 {
        return Err(Error::InvalidParameter("window and horizon must be positive".into()));
    }
    let needed = window + horizon;
    if series.len() < needed {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            needed,
        });
    }
    let z: Vec<f64> = series.iter().map(|&x| norm.normalize(x)).collect();
    let count = series.len() - needed + 1;
    let mut inputs = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    let mut origins = Vec::with_capacity(count);
    for m in (window - 1)..(window - 1 + count) {
        let x = match mode {
            FeatureMode::Identity => (0..window).map(|l| z[m - l]).collect(),
        };
        inputs.push(x);
        targets.push(z[m + 1..=m + horizon].to_vec());
        origins.push(m);
    }
    Ok(WindowedDataset {
        node: 0,
        window,
        horizon,
        n_features: window,
        inputs,
        targets,
        origins,
        normalization: norm,
    })
}

/// Raw (unnormalized) lag-window samples of `node`.
pub fn featurize(
    panel: &TimeSeriesPanel,
    node: usize,
    window: usize,
    horizon: usize,
    mode: FeatureMode,
) -> Result<WindowedDataset> {
    if node >= panel.graph().n() {
        return Err(Error::mismatch(panel.graph().n(), node, "node index"));
    }
    let mut ds = featurize_series(panel.series(node), window, horizon, mode, Normalization::IDENTITY)?;
    ds.node = node;
    Ok(ds)
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            valid: 0.2,
            test: 0.2,
        }
    }
}

/// Contiguous chronological sample ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

impl SplitFractions {
    /// Part sizes for `n` samples: floor each share, then hand the leftover
    /// samples to the parts with the largest fractional remainders (earlier
    /// parts win ties).
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        let f = [self.train, self.valid, self.test];
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::InvalidSplit(format!("fractions {f:?} outside [0, 1]")));
        }
        let total: f64 = f.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSplit(format!("fractions sum to {total}")));
        }
        let exact: Vec<f64> = f.iter().map(|x| x * n as f64).collect();
        let mut sizes = [0usize; 3];
        for i in 0..3 {
            sizes[i] = exact[i].floor() as usize;
        }
        let mut left = n - sizes.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            sizes[i] += 1;
            left -= 1;
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidSplit(format!(
                "{n} samples with fractions {f:?} leave an empty part"
            )));
        }
        Ok(sizes)
    }

    pub fn ranges(&self, n: usize) -> Result<SplitRanges> {
        let [a, b, c] = self.sizes(n)?;
        Ok(SplitRanges {
            train: 0..a,
            valid: a..a + b,
            test: a + b..a + b + c,
        })
    }
}

/// Chronological split of one dataset.
pub fn split(
    dataset: &WindowedDataset,
    fractions: SplitFractions,
) -> Result<(WindowedDataset, WindowedDataset, WindowedDataset)> {
    let r = fractions.ranges(dataset.len())?;
    Ok((dataset.slice(r.train), dataset.slice(r.valid), dataset.slice(r.test)))
}

/// Every node of a panel featurized on a common sample grid, normalized with
/// statistics from the observations that the training samples touch.
#[derive(Debug, Clone)]
pub struct HierarchicalDataset {
    pub graph: Arc<HierarchyGraph>,
    pub nodes: Vec<WindowedDataset>,
    pub split: SplitRanges,
    pub window: usize,
    pub horizon: usize,
}

impl HierarchicalDataset {
    pub fn build(
        panel: &TimeSeriesPanel,
        window: usize,
        horizon: usize,
        fractions: SplitFractions,
        normalize: bool,
    ) -> Result<Self> {
        let t = panel.len();
        if t < window + horizon {
            return Err(Error::SeriesTooShort {
                len: t,
                needed: window + horizon,
            });
        }
        let n_samples = t - window - horizon + 1;
        let split = fractions.ranges(n_samples)?;
        // Last observation used by a training sample (its final target).
        let fit_end = split.train.end + window + horizon - 1;
        let nodes = (0..panel.graph().n())
            .map(|i| {
                let series = panel.series(i);
                let norm = if normalize {
                    Normalization::fit(&series[..fit_end])
                } else {
                    Normalization::IDENTITY
                };
                let mut ds = featurize_series(series, window, horizon, FeatureMode::Identity, norm)?;
                ds.node = i;
                Ok(ds)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HierarchicalDataset {
            graph: panel.graph_arc(),
            nodes,
            split,
            window,
            horizon,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.nodes.first().map_or(0, WindowedDataset::len)
    }

    pub fn normalizations(&self) -> Vec<Normalization> {
        self.nodes.iter().map(|d| d.normalization).collect()
    }
}
