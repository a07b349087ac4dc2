//! Hierarchy structure: the signed parent/child tree over series, its levels,
//! and the equivalent summing matrix `S` with `y = S b`.
//!
//! Node order is canonical: aggregate nodes sorted by level (top first, ties in
//! declaration order), followed by bottom nodes in declaration order. Every
//! vector or matrix indexed by node in this crate uses that order.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A signed aggregation edge: `parent` includes `sign * child`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub parent: String,
    pub child: String,
    pub sign: i8,
}

impl Edge {
    pub fn new(parent: impl Into<String>, child: impl Into<String>) -> Self {
        Edge {
            parent: parent.into(),
            child: child.into(),
            sign: 1,
        }
    }

    pub fn signed(parent: impl Into<String>, child: impl Into<String>, sign: i8) -> Self {
        Edge {
            parent: parent.into(),
            child: child.into(),
            sign,
        }
    }
}

/// Validated hierarchy. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyGraph {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    levels: Vec<usize>,
    children: Vec<Vec<(usize, i8)>>,
    parent: Vec<Option<(usize, i8)>>,
    n_aggregate: usize,
}

impl HierarchyGraph {
    /// Builds a graph from an edge list, deriving levels from depth (roots are
    /// level 1).
    pub fn from_edges(edges: &[Edge]) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::EmptyHierarchy);
        }
        let declared = declaration_order(edges);
        let pos: HashMap<&str, usize> = declared
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let parent_of = parent_map(edges)?;

        // Any node whose parent chain never reaches a root sits on a cycle.
        for id in &declared {
            let mut seen = HashSet::new();
            let mut cur = id.as_str();
            while let Some(p) = parent_of.get(cur) {
                if !seen.insert(cur) {
                    return Err(Error::Cycle(cur.to_string()));
                }
                cur = p.as_str();
            }
        }

        let mut kids: Vec<Vec<usize>> = vec![Vec::new(); declared.len()];
        for e in edges {
            kids[pos[e.parent.as_str()]].push(pos[e.child.as_str()]);
        }
        let mut levels = vec![0usize; declared.len()];
        let mut queue: VecDeque<usize> = VecDeque::new();
        for (i, id) in declared.iter().enumerate() {
            if !parent_of.contains_key(id.as_str()) {
                levels[i] = 1;
                queue.push_back(i);
            }
        }
        while let Some(i) = queue.pop_front() {
            for &c in &kids[i] {
                levels[c] = levels[i] + 1;
                queue.push_back(c);
            }
        }
        let level_map: HashMap<String, usize> = declared
            .iter()
            .cloned()
            .zip(levels.iter().copied())
            .collect();
        Self::from_parts(&declared, edges, &level_map)
    }

    /// Builds a graph from explicit node ids, edges and level assignments,
    /// validating that the levels agree with the edge structure.
    pub fn from_parts(
        nodes: &[String],
        edges: &[Edge],
        levels: &HashMap<String, usize>,
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::EmptyHierarchy);
        }
        let mut declared_pos: HashMap<&str, usize> = HashMap::new();
        for (i, id) in nodes.iter().enumerate() {
            if declared_pos.insert(id.as_str(), i).is_some() {
                return Err(Error::InconsistentLevel {
                    node: id.clone(),
                    reason: "node declared twice".into(),
                });
            }
        }
        for e in edges {
            for id in [&e.parent, &e.child] {
                if !declared_pos.contains_key(id.as_str()) {
                    return Err(Error::UnknownNode(id.clone()));
                }
            }
            if e.sign != 1 && e.sign != -1 {
                return Err(Error::InvalidSign(e.sign as i64));
            }
            if e.parent == e.child {
                return Err(Error::Cycle(e.parent.clone()));
            }
        }
        let parent_of = parent_map(edges)?;

        let level_of = |id: &str| -> Result<usize> {
            match levels.get(id) {
                Some(&l) if l >= 1 => Ok(l),
                Some(_) => Err(Error::InconsistentLevel {
                    node: id.to_string(),
                    reason: "levels start at 1".into(),
                }),
                None => Err(Error::InconsistentLevel {
                    node: id.to_string(),
                    reason: "no level assigned".into(),
                }),
            }
        };
        for e in edges {
            let lp = level_of(&e.parent)?;
            let lc = level_of(&e.child)?;
            if lc != lp + 1 {
                return Err(Error::InconsistentLevel {
                    node: e.child.clone(),
                    reason: format!("child at level {lc} under parent at level {lp}"),
                });
            }
        }
        let has_children: HashSet<&str> = edges.iter().map(|e| e.parent.as_str()).collect();
        for id in nodes {
            let l = level_of(id)?;
            let is_root = !parent_of.contains_key(id.as_str());
            if is_root && l != 1 {
                return Err(Error::OrphanNode(id.clone()));
            }
            if is_root && nodes.len() > 1 && !has_children.contains(id.as_str()) {
                return Err(Error::OrphanNode(id.clone()));
            }
        }

        // Canonical order: aggregates by (level, declaration), then bottoms.
        let mut aggregates: Vec<&String> = nodes
            .iter()
            .filter(|id| has_children.contains(id.as_str()))
            .collect();
        aggregates.sort_by_key(|id| (levels[id.as_str()], declared_pos[id.as_str()]));
        let bottoms: Vec<&String> = nodes
            .iter()
            .filter(|id| !has_children.contains(id.as_str()))
            .collect();
        let n_aggregate = aggregates.len();
        let ids: Vec<String> = aggregates.into_iter().chain(bottoms).cloned().collect();
        let index: HashMap<String, usize> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();

        let mut children = vec![Vec::new(); ids.len()];
        let mut parent = vec![None; ids.len()];
        for e in edges {
            let p = index[&e.parent];
            let c = index[&e.child];
            children[p].push((c, e.sign));
            parent[c] = Some((p, e.sign));
        }
        let node_levels = ids.iter().map(|id| levels[id.as_str()]).collect();

        Ok(HierarchyGraph {
            ids,
            index,
            levels: node_levels,
            children,
            parent,
            n_aggregate,
        })
    }

    /// A hierarchy consisting of one bottom series and no aggregates.
    pub fn single(id: impl Into<String>) -> Self {
        let id = id.into();
        let mut levels = HashMap::new();
        levels.insert(id.clone(), 1);
        Self::from_parts(&[id], &[], &levels).expect("single node graph is valid")
    }

    /// Balanced tree with the given fan-out per level, top first. Node ids
    /// are path-like: `T`, `T.1`, `T.1.2`, ...
    pub fn balanced(fanouts: &[usize]) -> Result<Self> {
        if fanouts.is_empty() {
            return Ok(Self::single("T"));
        }
        if fanouts.contains(&0) {
            return Err(Error::InvalidParameter("fan-out must be positive".into()));
        }
        let mut edges = Vec::new();
        let mut frontier = vec!["T".to_string()];
        for &f in fanouts {
            let mut next = Vec::with_capacity(frontier.len() * f);
            for p in &frontier {
                for c in 1..=f {
                    let child = format!("{p}.{c}");
                    edges.push(Edge::new(p.clone(), child.clone()));
                    next.push(child);
                }
            }
            frontier = next;
        }
        Self::from_edges(&edges)
    }

    /// Total node count `n`.
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    /// Bottom node count `m`.
    pub fn m(&self) -> usize {
        self.ids.len() - self.n_aggregate
    }

    /// Aggregate node count `k = n - m`.
    pub fn k(&self) -> usize {
        self.n_aggregate
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, node: usize) -> &str {
        &self.ids[node]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn level(&self, node: usize) -> usize {
        self.levels[node]
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    /// Deepest level index.
    pub fn depth(&self) -> usize {
        self.levels.iter().copied().max().unwrap_or(0)
    }

    pub fn children(&self, node: usize) -> &[(usize, i8)] {
        &self.children[node]
    }

    pub fn parent(&self, node: usize) -> Option<(usize, i8)> {
        self.parent[node]
    }

    pub fn is_bottom(&self, node: usize) -> bool {
        node >= self.n_aggregate
    }

    pub fn aggregates(&self) -> std::ops::Range<usize> {
        0..self.n_aggregate
    }

    pub fn bottoms(&self) -> std::ops::Range<usize> {
        self.n_aggregate..self.ids.len()
    }

    /// Nodes at `level`, in canonical order.
    pub fn nodes_at_level(&self, level: usize) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.levels[i] == level)
            .collect()
    }

    /// Edges in canonical node order.
    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::new();
        for p in self.aggregates() {
            for &(c, sign) in &self.children[p] {
                out.push(Edge::signed(self.ids[p].clone(), self.ids[c].clone(), sign));
            }
        }
        out
    }

    /// Parses the `parent,child,sign` edge-list CSV (sign optional, default 1).
    /// A lone row with an empty parent declares a single-node hierarchy.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (pc, cc) = match (col("parent"), col("child")) {
            (Some(p), Some(c)) => (p, c),
            _ => {
                return Err(Error::InvalidParameter(
                    "hierarchy csv needs `parent` and `child` columns".into(),
                ))
            }
        };
        let sc = col("sign");
        let mut edges = Vec::new();
        let mut standalone = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let sign = match sc.and_then(|i| rec.get(i)).filter(|s| !s.is_empty()) {
                None => 1,
                Some(s) => {
                    let v: i64 = s.parse().map_err(|_| Error::NonNumeric {
                        value: s.to_string(),
                        line: line + 2,
                    })?;
                    if v != 1 && v != -1 {
                        return Err(Error::InvalidSign(v));
                    }
                    v as i8
                }
            };
            let field = |i: usize| rec.get(i).unwrap_or("").to_string();
            if field(pc).is_empty() {
                standalone.push(field(cc));
            } else {
                edges.push(Edge::signed(field(pc), field(cc), sign));
            }
        }
        match (edges.is_empty(), standalone.as_slice()) {
            (true, [id]) if !id.is_empty() => Ok(Self::single(id.clone())),
            (_, []) => Self::from_edges(&edges),
            _ => Err(Error::InvalidParameter(
                "rows without a parent are only allowed for a single-node hierarchy".into(),
            )),
        }
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["parent", "child", "sign"])?;
        if self.n() == 1 {
            w.write_record(["", self.ids[0].as_str(), ""])?;
        }
        for e in self.edges() {
            w.write_record([e.parent.as_str(), e.child.as_str(), &e.sign.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn declaration_order(edges: &[Edge]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for e in edges {
        for id in [&e.parent, &e.child] {
            if seen.insert(id.clone()) {
                out.push(id.clone());
            }
        }
    }
    out
}

fn parent_map(edges: &[Edge]) -> Result<HashMap<&str, &String>> {
    let mut parent_of: HashMap<&str, &String> = HashMap::new();
    let mut seen_edges = HashSet::new();
    for e in edges {
        if e.sign != 1 && e.sign != -1 {
            return Err(Error::InvalidSign(e.sign as i64));
        }
        if !seen_edges.insert((e.parent.as_str(), e.child.as_str())) {
            return Err(Error::DuplicateEdge {
                parent: e.parent.clone(),
                child: e.child.clone(),
            });
        }
        if e.parent == e.child {
            return Err(Error::Cycle(e.parent.clone()));
        }
        if parent_of.insert(e.child.as_str(), &e.parent).is_some() {
            return Err(Error::MultipleParents(e.child.clone()));
        }
    }
    Ok(parent_of)
}

/// The `n x m` signed summing matrix. The last `m` rows form the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SummingMatrix {
    matrix: DMatrix<f64>,
}

impl SummingMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn m(&self) -> usize {
        self.matrix.ncols()
    }

    /// `S b` for a bottom-level vector.
    pub fn aggregate(&self, bottom: &[f64]) -> Result<Vec<f64>> {
        if bottom.len() != self.m() {
            return Err(Error::mismatch(self.m(), bottom.len(), "bottom vector"));
        }
        let b = nalgebra::DVector::from_column_slice(bottom);
        Ok((&self.matrix * b).iter().copied().collect())
    }
}

/// Builds `S` so that `S b` reproduces the signed aggregation for any bottom
/// assignment `b`.
pub fn build_summing_matrix(graph: &HierarchyGraph) -> SummingMatrix {
    let n = graph.n();
    let m = graph.m();
    let k = graph.k();
    let mut s = DMatrix::<f64>::zeros(n, m);
    for j in 0..m {
        s[(k + j, j)] = 1.0;
    }
    // Aggregates are level-ordered, so deeper rows are complete before use.
    for i in graph.aggregates().rev() {
        for &(c, sign) in graph.children(i) {
            for j in 0..m {
                s[(i, j)] += sign as f64 * s[(c, j)];
            }
        }
    }
    SummingMatrix { matrix: s }
}

/// Per-aggregate residual `values[i] - sum sign * values[child]`, in
/// canonical aggregate order. All zeros iff `values` is coherent.
pub fn coherency_residual(graph: &HierarchyGraph, values: &[f64]) -> Result<Vec<f64>> {
    if values.len() != graph.n() {
        return Err(Error::mismatch(graph.n(), values.len(), "node values"));
    }
    Ok(graph
        .aggregates()
        .map(|i| {
            let sum: f64 = graph
                .children(i)
                .iter()
                .map(|&(c, sign)| sign as f64 * values[c])
                .sum();
            values[i] - sum
        })
        .collect())
}

/// Mean over horizons of the summed absolute coherency residuals.
/// `forecasts[node][h]` holds the point forecast of `node` at horizon `h`.
pub fn reconciliation_error(graph: &HierarchyGraph, forecasts: &[Vec<f64>]) -> Result<f64> {
    if forecasts.len() != graph.n() {
        return Err(Error::mismatch(graph.n(), forecasts.len(), "forecast nodes"));
    }
    let horizons = forecasts.first().map_or(0, Vec::len);
    if horizons == 0 {
        return Err(Error::InvalidParameter("no forecast horizons".into()));
    }
    if let Some(row) = forecasts.iter().find(|r| r.len() != horizons) {
        return Err(Error::mismatch(horizons, row.len(), "forecast horizons"));
    }
    let mut total = 0.0;
    let mut column = vec![0.0; graph.n()];
    for h in 0..horizons {
        for (i, row) in forecasts.iter().enumerate() {
            column[i] = row[h];
        }
        total += coherency_residual(graph, &column)?
            .iter()
            .map(|r| r.abs())
            .sum::<f64>();
    }
    Ok(total / horizons as f64)
}

#[cfg(test)]
pub(crate) use tests::figure_one;
