//! Directed flow-graph data model, CSV ingestion, and topology transforms.
//!
//! Nodes carry stable string labels; internal ids are assigned by
//! lexicographic sort of the labels so that the same files always produce
//! the same numbering. Edges point in the direction of flow (upstream to
//! downstream) and carry a fixed-width feature vector.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Directed graph with per-edge feature vectors.
///
/// Invariants enforced at construction:
/// - edge endpoints are valid node ids and `src != dst`
/// - no duplicate `(src, dst)` pairs
/// - every edge carries exactly `feature_width` finite feature values
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedGraph {
    node_ids: Vec<String>,
    edges: Vec<(usize, usize)>,
    edge_features: Vec<Vec<f64>>,
    feature_width: usize,
    // adjacency indexed by node: (neighbor, edge index), ascending by neighbor
    incoming: Vec<Vec<(usize, usize)>>,
    outgoing: Vec<Vec<(usize, usize)>>,
}

impl DirectedGraph {
    /// Build a graph from string-labelled nodes and edges.
    ///
    /// `labels` may contain nodes that no edge touches (isolated nodes).
    /// Internal ids follow the lexicographic order of the labels.
    pub fn from_parts(
        labels: &[String],
        edges: &[(String, String)],
        edge_features: &[Vec<f64>],
    ) -> Result<Self> {
        if edges.len() != edge_features.len() {
            return Err(Error::Schema(format!(
                "{} edges but {} feature rows",
                edges.len(),
                edge_features.len()
            )));
        }
        let mut sorted: Vec<String> = labels.to_vec();
        sorted.sort();
        sorted.dedup();
        let index: BTreeMap<&str, usize> = sorted
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();

        let feature_width = edge_features.first().map_or(0, Vec::len);
        let mut resolved = Vec::with_capacity(edges.len());
        let mut seen = BTreeSet::new();
        for (row, ((src, dst), feats)) in edges.iter().zip(edge_features).enumerate() {
            let s = *index
                .get(src.as_str())
                .ok_or_else(|| Error::Schema(format!("edge {row}: unknown node '{src}'")))?;
            let d = *index
                .get(dst.as_str())
                .ok_or_else(|| Error::Schema(format!("edge {row}: unknown node '{dst}'")))?;
            if s == d {
                return Err(Error::Schema(format!("edge {row}: self-loop on '{src}'")));
            }
            if !seen.insert((s, d)) {
                return Err(Error::Schema(format!(
                    "duplicate edge '{src}' -> '{dst}'"
                )));
            }
            if feats.len() != feature_width {
                return Err(Error::Schema(format!(
                    "edge {row}: expected {feature_width} features, got {}",
                    feats.len()
                )));
            }
            if feats.iter().any(|v| !v.is_finite()) {
                return Err(Error::Value(format!("edge {row}: non-finite feature")));
            }
            resolved.push((s, d));
        }

        let n = sorted.len();
        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        for (e, &(s, d)) in resolved.iter().enumerate() {
            incoming[d].push((s, e));
            outgoing[s].push((d, e));
        }
        for adj in incoming.iter_mut().chain(outgoing.iter_mut()) {
            adj.sort_unstable();
        }

        Ok(Self {
            node_ids: sorted,
            edges: resolved,
            edge_features: edge_features.to_vec(),
            feature_width,
            incoming,
            outgoing,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Width `q` of the per-edge feature vectors.
    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_features(&self) -> &[Vec<f64>] {
        &self.edge_features
    }

    pub fn node_labels(&self) -> &[String] {
        &self.node_ids
    }

    pub fn label(&self, node: usize) -> &str {
        &self.node_ids[node]
    }

    /// Internal id for an external label.
    pub fn node_index(&self, label: &str) -> Option<usize> {
        self.node_ids.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    /// Upstream neighbors of `node`: all `j` with an edge `j -> node`,
    /// ascending by `j`, paired with the edge index.
    pub fn upstream_neighbors(&self, node: usize) -> Result<&[(usize, usize)]> {
        self.incoming
            .get(node)
            .map(Vec::as_slice)
            .ok_or(Error::Index {
                what: "node",
                index: node,
                size: self.num_nodes(),
            })
    }

    /// Downstream neighbors of `node`: all `j` with an edge `node -> j`.
    pub fn downstream_neighbors(&self, node: usize) -> Result<&[(usize, usize)]> {
        self.outgoing
            .get(node)
            .map(Vec::as_slice)
            .ok_or(Error::Index {
                what: "node",
                index: node,
                size: self.num_nodes(),
            })
    }

    /// New graph with every edge direction flipped; features and node
    /// labelling are carried over unchanged.
    pub fn reverse_topology(&self) -> Self {
        let n = self.num_nodes();
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|&(s, d)| (d, s)).collect();
        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        for (e, &(s, d)) in edges.iter().enumerate() {
            incoming[d].push((s, e));
            outgoing[s].push((d, e));
        }
        for adj in incoming.iter_mut().chain(outgoing.iter_mut()) {
            adj.sort_unstable();
        }
        Self {
            node_ids: self.node_ids.clone(),
            edges,
            edge_features: self.edge_features.clone(),
            feature_width: self.feature_width,
            incoming,
            outgoing,
        }
    }
}

/// Time-indexed node observations, shape `(time, node, variable)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSeries {
    values: Vec<f64>,
    steps: usize,
    num_nodes: usize,
    num_vars: usize,
}

impl NodeSeries {
    pub fn new(steps: usize, num_nodes: usize, num_vars: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != steps * num_nodes * num_vars {
            return Err(Error::Shape(format!(
                "series of {} values cannot have shape ({steps}, {num_nodes}, {num_vars})",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Value("non-finite value in node series".into()));
        }
        Ok(Self {
            values,
            steps,
            num_nodes,
            num_vars,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn get(&self, t: usize, node: usize, var: usize) -> f64 {
        self.values[(t * self.num_nodes + node) * self.num_vars + var]
    }

    pub fn set(&mut self, t: usize, node: usize, var: usize, v: f64) {
        self.values[(t * self.num_nodes + node) * self.num_vars + var] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Ground-truth flux volumes, shape `(time, node)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    values: Vec<f64>,
    steps: usize,
    num_nodes: usize,
}

impl Targets {
    pub fn new(steps: usize, num_nodes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != steps * num_nodes {
            return Err(Error::Shape(format!(
                "targets of {} values cannot have shape ({steps}, {num_nodes})",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Value("non-finite value in targets".into()));
        }
        Ok(Self {
            values,
            steps,
            num_nodes,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn get(&self, t: usize, node: usize) -> f64 {
        self.values[t * self.num_nodes + node]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Directed ring `r0 -> r1 -> ... -> r(n-1) -> r0` with unit edge features.
///
/// Every node has exactly one upstream neighbor, so difference operators
/// built on it are circulant with no boundary rows.
pub fn directed_ring(n: usize) -> DirectedGraph {
    assert!(n >= 2, "ring needs at least 2 nodes");
    let width = (n - 1).to_string().len();
    let labels: Vec<String> = (0..n).map(|i| format!("r{i:0width$}")).collect();
    let edges: Vec<(String, String)> = (0..n)
        .map(|i| (labels[i].clone(), labels[(i + 1) % n].clone()))
        .collect();
    let feats = vec![vec![1.0]; n];
    DirectedGraph::from_parts(&labels, &edges, &feats).expect("ring is a valid graph")
}

/// Load a graph from an edge CSV with header `src,dst,f1,...,fq`.
///
/// The node set is the set of labels appearing in the file; ids are assigned
/// by lexicographic sort.
pub fn load_graph(edge_file: &Path) -> Result<DirectedGraph> {
    let mut reader = csv::Reader::from_path(edge_file)?;
    let header_len = reader.headers()?.len();
    if header_len < 2 {
        return Err(Error::Schema(format!(
            "{}: edge CSV needs at least src,dst columns",
            edge_file.display()
        )));
    }
    let mut labels = Vec::new();
    let mut edges = Vec::new();
    let mut features = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != header_len {
            return Err(Error::Schema(format!(
                "edge row {row}: expected {header_len} fields, got {}",
                record.len()
            )));
        }
        let src = record[0].to_string();
        let dst = record[1].to_string();
        let feats: Vec<f64> = record
            .iter()
            .skip(2)
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Schema(format!("edge row {row}: bad feature '{f}'")))
            })
            .collect::<Result<_>>()?;
        labels.push(src.clone());
        labels.push(dst.clone());
        edges.push((src, dst));
        features.push(feats);
    }
    DirectedGraph::from_parts(&labels, &edges, &features)
}

/// Write the edge CSV for `g`, the inverse of [`load_graph`].
pub fn save_graph(g: &DirectedGraph, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("src,dst");
    for k in 1..=g.feature_width() {
        let _ = write!(out, ",f{k}");
    }
    out.push('\n');
    for (e, &(s, d)) in g.edges().iter().enumerate() {
        let _ = write!(out, "{},{}", g.label(s), g.label(d));
        for v in &g.edge_features()[e] {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load a dense node-series CSV with header `time,node,v1,...,vp`.
///
/// Every `(time, node)` pair must be present; node labels must exactly match
/// the graph's label set.
pub fn load_node_series(path: &Path, g: &DirectedGraph) -> Result<NodeSeries> {
    let mut reader = csv::Reader::from_path(path)?;
    let num_vars = reader.headers()?.len().saturating_sub(2);
    if num_vars == 0 {
        return Err(Error::Schema(format!(
            "{}: node series needs at least one variable column",
            path.display()
        )));
    }
    let n = g.num_nodes();
    let mut cells: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut max_t = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let t: usize = record[0]
            .parse()
            .map_err(|_| Error::Schema(format!("series row {row}: bad time '{}'", &record[0])))?;
        let node = g
            .node_index(&record[1])
            .ok_or_else(|| Error::Schema(format!("series row {row}: dangling node '{}'", &record[1])))?;
        let vals: Vec<f64> = record
            .iter()
            .skip(2)
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Schema(format!("series row {row}: bad value '{f}'")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != num_vars {
            return Err(Error::Schema(format!(
                "series row {row}: expected {num_vars} variables, got {}",
                vals.len()
            )));
        }
        max_t = max_t.max(t);
        if cells.insert((t, node), vals).is_some() {
            return Err(Error::Schema(format!(
                "series row {row}: duplicate (time, node) cell"
            )));
        }
    }
    let steps = max_t + 1;
    if cells.len() != steps * n {
        return Err(Error::Schema(format!(
            "node series is not dense: {} cells for {steps} steps x {n} nodes",
            cells.len()
        )));
    }
    let mut values = vec![0.0; steps * n * num_vars];
    for ((t, node), vals) in cells {
        let base = (t * n + node) * num_vars;
        values[base..base + num_vars].copy_from_slice(&vals);
    }
    NodeSeries::new(steps, n, num_vars, values)
}

/// Write the node-series CSV, the inverse of [`load_node_series`].
pub fn save_node_series(series: &NodeSeries, g: &DirectedGraph, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("time,node");
    for k in 1..=series.num_vars() {
        let _ = write!(out, ",v{k}");
    }
    out.push('\n');
    for t in 0..series.steps() {
        for node in 0..series.num_nodes() {
            let _ = write!(out, "{t},{}", g.label(node));
            for var in 0..series.num_vars() {
                let _ = write!(out, ",{}", series.get(t, node, var));
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load a targets CSV with header `time,node,y`.
pub fn load_targets(path: &Path, g: &DirectedGraph) -> Result<Targets> {
    let mut reader = csv::Reader::from_path(path)?;
    let n = g.num_nodes();
    let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut max_t = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let t: usize = record[0]
            .parse()
            .map_err(|_| Error::Schema(format!("targets row {row}: bad time '{}'", &record[0])))?;
        let node = g
            .node_index(&record[1])
            .ok_or_else(|| Error::Schema(format!("targets row {row}: dangling node '{}'", &record[1])))?;
        let y: f64 = record[2]
            .parse()
            .map_err(|_| Error::Schema(format!("targets row {row}: bad value '{}'", &record[2])))?;
        max_t = max_t.max(t);
        if cells.insert((t, node), y).is_some() {
            return Err(Error::Schema(format!(
                "targets row {row}: duplicate (time, node) cell"
            )));
        }
    }
    let steps = max_t + 1;
    if cells.len() != steps * n {
        return Err(Error::Schema(format!(
            "targets are not dense: {} cells for {steps} steps x {n} nodes",
            cells.len()
        )));
    }
    let mut values = vec![0.0; steps * n];
    for ((t, node), y) in cells {
        values[t * n + node] = y;
    }
    Targets::new(steps, n, values)
}

/// Write the targets CSV, the inverse of [`load_targets`].
pub fn save_targets(targets: &Targets, g: &DirectedGraph, path: &Path) -> Result<()> {
    let mut out = String::from("time,node,y\n");
    for t in 0..targets.steps() {
        for node in 0..targets.num_nodes() {
            let _ = write!(out, "{t},{},{}\n", g.label(node), targets.get(t, node));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
