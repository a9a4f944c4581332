//! Undirected attributed graphs in compressed sparse row form.
//!
//! Edges are stored once as canonical `(u, v)` pairs with `u < v`, sorted
//! lexicographically. The CSR view lists, for every node, its neighbors in
//! ascending order together with the id of the undirected edge behind each
//! slot, so per-edge state (trust) can be shared by both directions.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    slot_edges: Vec<usize>,
    features: Array2<f64>,
    labels: Option<Vec<u8>>,
    node_ids: Option<Vec<String>>,
}

/// Counts of input lines that were normalized away while building a graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub self_loops_dropped: usize,
    pub duplicates_collapsed: usize,
}

impl Graph {
    /// Builds a graph from an arbitrary edge list.
    ///
    /// Self-loops are dropped and duplicate undirected edges collapsed; both
    /// are counted in the returned report. Endpoints must be `< N`.
    pub fn new(
        features: Array2<f64>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        labels: Option<Vec<u8>>,
    ) -> Result<(Self, BuildReport)> {
        let n = features.nrows();
        if features.ncols() == 0 {
            return Err(Error::Shape("feature dimension must be at least 1".into()));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Shape(format!(
                    "{} labels for {} nodes",
                    l.len(),
                    n
                )));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(Error::InvalidConfig("labels must be 0 or 1".into()));
            }
        }
        let mut report = BuildReport::default();
        let mut canon = Vec::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Shape(format!(
                    "edge ({a}, {b}) has an endpoint outside 0..{n}"
                )));
            }
            if a == b {
                report.self_loops_dropped += 1;
                continue;
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        let before = canon.len();
        canon.dedup();
        report.duplicates_collapsed = before - canon.len();
        Ok((Self::from_canonical(features, canon, labels), report))
    }

    /// `edges` must already be sorted, deduplicated, loop-free, with `u < v < N`.
    fn from_canonical(
        features: Array2<f64>,
        edges: Vec<(usize, usize)>,
        labels: Option<Vec<u8>>,
    ) -> Self {
        let n = features.nrows();
        let mut degree = vec![0usize; n];
        for &(u, v) in &edges {
            degree[u] += 1;
            degree[v] += 1;
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut cursor = offsets[..n].to_vec();
        let mut neighbors = vec![0usize; 2 * edges.len()];
        let mut slot_edges = vec![0usize; 2 * edges.len()];
        // Edges are sorted by (u, v). Filling the smaller-neighbor side first
        // (ascending u) and then the larger side (ascending v) leaves every
        // neighbor list sorted.
        for (e, &(u, v)) in edges.iter().enumerate() {
            neighbors[cursor[v]] = u;
            slot_edges[cursor[v]] = e;
            cursor[v] += 1;
        }
        for (e, &(u, v)) in edges.iter().enumerate() {
            neighbors[cursor[u]] = v;
            slot_edges[cursor[u]] = e;
            cursor[u] += 1;
        }
        Graph {
            num_nodes: n,
            edges,
            offsets,
            neighbors,
            slot_edges,
            features,
            labels,
            node_ids: None,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Canonical undirected edges `(u, v)` with `u < v`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Neighbors of `i` in ascending order.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Undirected edge ids aligned with [`Graph::neighbors`].
    pub fn neighbor_edges(&self, i: usize) -> &[usize] {
        &self.slot_edges[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn node_ids(&self) -> Option<&[String]> {
        self.node_ids.as_deref()
    }

    pub fn with_node_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.num_nodes {
            return Err(Error::Shape(format!(
                "{} node ids for {} nodes",
                ids.len(),
                self.num_nodes
            )));
        }
        self.node_ids = Some(ids);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.num_nodes {
            return Err(Error::Shape(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.num_nodes
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub(crate) fn into_parts(self) -> (Array2<f64>, Vec<(usize, usize)>, Option<Vec<u8>>) {
        (self.features, self.edges, self.labels)
    }
}

/// Loads a graph from an edge list, a headerless feature CSV and an optional
/// label file. See the README for the exact formats.
pub fn load_graph(
    edge_path: &Path,
    feature_path: &Path,
    label_path: Option<&Path>,
) -> Result<(Graph, BuildReport)> {
    let features = read_features(feature_path)?;
    let n = features.nrows();
    let edges = read_edges(edge_path, n)?;
    let labels = match label_path {
        Some(p) => {
            let l = read_labels(p)?;
            if l.len() != n {
                return Err(Error::Shape(format!(
                    "label file {} has {} rows but feature file {} has {}",
                    p.display(),
                    l.len(),
                    feature_path.display(),
                    n
                )));
            }
            Some(l)
        }
        None => None,
    };
    let (g, report) = Graph::new(features, edges, labels)?;
    if report.self_loops_dropped > 0 {
        log::warn!(
            "{}: dropped {} self-loop line(s)",
            edge_path.display(),
            report.self_loops_dropped
        );
    }
    Ok((g, report))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn read_features(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(format!("reading feature file {}", path.display()), io),
            other => Error::Format {
                path: path.to_path_buf(),
                line: 0,
                message: format!("{other:?}"),
            },
        })?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0usize;
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 1;
        let record = record.map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    line,
                    message: format!("expected {w} columns, found {}", record.len()),
                })
            }
            _ => {}
        }
        for cell in record.iter() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                value: cell.to_string(),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        line: 0,
        message: "feature file is empty".into(),
    })?;
    Array2::from_shape_vec((rows, width), data).map_err(|e| Error::Shape(e.to_string()))
}

fn read_edges(path: &Path, n: usize) -> Result<Vec<(usize, usize)>> {
    let text = read_to_string(path)?;
    let mut edges = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let (a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    line,
                    message: format!("expected two node indices, found {trimmed:?}"),
                })
            }
        };
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                line,
                message: format!("{s:?} is not a node index"),
            })
        };
        let (a, b) = (parse(a)?, parse(b)?);
        if a >= n || b >= n {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line,
                message: format!("endpoint out of range: ({a}, {b}) with {n} nodes"),
            });
        }
        edges.push((a, b));
    }
    Ok(edges)
}

fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let text = read_to_string(path)?;
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        match trimmed {
            "0" => labels.push(0),
            "1" => labels.push(1),
            other => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: format!("label must be 0 or 1, found {other:?}"),
                })
            }
        }
    }
    Ok(labels)
}
