//! Datasets: file loaders, the stochastic-block-model generator and random
//! graph helpers used by tests, the CLI and the benchmark.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{parse_edge_list, Graph};
use crate::matrix::Matrix;
use crate::rng;

const SBM_MAX_TRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    /// `original_labels[c]` is the file label mapped to class `c`.
    pub original_labels: Vec<i64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: Arc<Graph>,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub meta: DatasetMeta,
    pe: Option<Matrix>,
}

impl Dataset {
    pub fn new(
        graph: Graph,
        features: Matrix,
        labels: Vec<usize>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let n = graph.num_nodes();
        if features.rows() != n {
            return Err(Error::invalid(format!(
                "feature rows ({}) differ from node count ({n})",
                features.rows()
            )));
        }
        if labels.len() != n {
            return Err(Error::invalid(format!(
                "label count ({}) differs from node count ({n})",
                labels.len()
            )));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            graph: Arc::new(graph),
            features,
            labels,
            num_classes,
            meta,
            pe: None,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    /// Computes (once) and caches `m` Laplacian positional-encoding columns.
    pub fn ensure_pe(&mut self, m: usize) -> Result<()> {
        if self.pe.as_ref().map(Matrix::cols) != Some(m) {
            self.pe = Some(if m == 0 {
                Matrix::zeros(self.num_nodes(), 0)
            } else {
                self.graph.laplacian_pe(m)?
            });
        }
        Ok(())
    }

    pub fn pe(&self) -> Option<&Matrix> {
        self.pe.as_ref()
    }

    /// `[X, P]` when a positional encoding is cached, `X` otherwise.
    pub fn input_features(&self) -> Matrix {
        match &self.pe {
            Some(p) if p.cols() > 0 => {
                Matrix::concat_cols(&[&self.features, p]).expect("row counts checked")
            }
            _ => self.features.clone(),
        }
    }

    /// SHA-256 over edges, feature bits and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_nodes() as u64).to_le_bytes());
        for (u, v) in self.graph.edges() {
            h.update((u as u64).to_le_bytes());
            h.update((v as u64).to_le_bytes());
        }
        for x in self.features.as_slice() {
            h.update(x.to_bits().to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads a feature CSV. A first row whose first cell is not a number is
/// treated as a header.
pub fn read_features(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_features(&text, path)
}

pub fn parse_features(text: &str, path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let line = idx + 1;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if idx == 0 && rec.get(0).is_some_and(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>().map_err(|_| {
                    parse_err(line, format!("column {}: `{cell}` is not a number", c + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(
                    line,
                    format!("expected {} columns, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(0, "no feature rows".into()));
    }
    let cols = rows[0].len();
    Matrix::from_vec(rows.len(), cols, rows.into_iter().flatten().collect())
}

/// One integer per non-empty line.
pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<i64>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<i64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("`{}` is not an integer label", l.trim()),
            })
        })
        .collect()
}

/// Maps arbitrary integer labels onto `0..C` in ascending order.
pub fn remap_labels(raw: &[i64]) -> (Vec<usize>, Vec<i64>) {
    let distinct: BTreeMap<i64, usize> = raw.iter().map(|&l| (l, 0)).collect();
    let original: Vec<i64> = distinct.keys().copied().collect();
    let index: BTreeMap<i64, usize> = original.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    (raw.iter().map(|l| index[l]).collect(), original)
}

/// Node count comes from the feature file; edges must reference nodes below it.
pub fn load_dataset(edge_path: &Path, feature_path: &Path, label_path: &Path) -> Result<Dataset> {
    let features = read_features(feature_path)?;
    let n = features.rows();
    let label_text = fs::read_to_string(label_path).map_err(|e| Error::io(label_path, e))?;
    let raw = parse_labels(&label_text, label_path)?;
    if raw.len() != n {
        return Err(Error::invalid(format!(
            "{} has {} labels but {} has {n} feature rows",
            label_path.display(),
            raw.len(),
            feature_path.display()
        )));
    }
    let edge_text = fs::read_to_string(edge_path).map_err(|e| Error::io(edge_path, e))?;
    let edges = parse_edge_list(&edge_text, edge_path)?;
    let graph = Graph::from_edges(n, &edges)?;
    let (labels, original_labels) = remap_labels(&raw);
    let name = edge_path.file_stem().map_or_else(
        || "dataset".to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    Dataset::new(
        graph,
        features,
        labels,
        DatasetMeta {
            name,
            original_labels,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub blocks: usize,
    pub per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub signal: f64,
}

/// Stochastic block model. Features are the one-hot block indicator plus
/// standard normal noise divided by `signal`; labels are block ids. The graph
/// is redrawn from the same stream until connected.
pub fn synth_sbm(spec: SbmSpec, seed: u64) -> Result<Dataset> {
    let SbmSpec {
        blocks,
        per_block,
        p_in,
        p_out,
        signal,
    } = spec;
    for (name, p) in [("p_in", p_in), ("p_out", p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("{name} = {p} is not a probability")));
        }
    }
    if blocks == 0 || per_block == 0 {
        return Err(Error::invalid(
            "SBM needs at least one block and one node per block",
        ));
    }
    if !(signal > 0.0 && signal.is_finite()) {
        return Err(Error::invalid(format!(
            "signal must be positive, got {signal}"
        )));
    }
    let n = blocks * per_block;
    let labels: Vec<usize> = (0..n).map(|i| i / per_block).collect();
    let mut rng = rng::seeded(seed);
    let mut graph = None;
    for _ in 0..SBM_MAX_TRIES {
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                let p = if labels[u] == labels[v] { p_in } else { p_out };
                if rng.random::<f64>() < p {
                    edges.push((u, v));
                }
            }
        }
        let g = Graph::from_edges(n, &edges)?;
        if g.is_connected() && g.self_looped_nodes().is_empty() || n == 1 {
            graph = Some(g);
            break;
        }
    }
    let graph = graph.ok_or_else(|| {
        Error::invalid(format!(
            "SBM graph not connected after {SBM_MAX_TRIES} draws"
        ))
    })?;
    let mut features = Matrix::zeros(n, blocks);
    for (i, &y) in labels.iter().enumerate() {
        for (c, x) in features.row_mut(i).iter_mut().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            *x = f64::from(u8::from(c == y)) + noise / signal;
        }
    }
    let meta = DatasetMeta {
        name: format!("sbm-{blocks}x{per_block}"),
        original_labels: (0..blocks as i64).collect(),
    };
    Dataset::new(graph, features, labels, meta)
}

/// Random spanning tree over a shuffled node order plus each remaining pair
/// with probability `extra_p`. Always connected.
pub fn random_connected_graph<R: Rng + ?Sized>(
    n: usize,
    extra_p: f64,
    rng: &mut R,
) -> Result<Graph> {
    if n == 0 {
        return Err(Error::invalid("graph needs at least one node"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut edges = Vec::new();
    for i in 1..n {
        let parent = order[rng.random_range(0..i)];
        edges.push((order[i], parent));
    }
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < extra_p {
                edges.push((u, v));
            }
        }
    }
    Graph::from_edges(n, &edges)
}

/// Connected and non-bipartite (`n ≥ 3`). If the random draw is bipartite an
/// edge closing an odd cycle through node 0 is added.
pub fn random_ergodic_graph<R: Rng + ?Sized>(n: usize, extra_p: f64, rng: &mut R) -> Result<Graph> {
    if n < 3 {
        return Err(Error::invalid(format!(
            "an ergodic simple graph needs n ≥ 3, got {n}"
        )));
    }
    let g = random_connected_graph(n, extra_p, rng)?;
    if !g.is_bipartite() {
        return Ok(g);
    }
    let dist = bfs_distances(&g, 0);
    let mut edges = g.edges();
    match (1..n).find(|&v| dist[v] >= 2 && dist[v].is_multiple_of(2)) {
        Some(v) => edges.push((0, v)),
        None => {
            // Every other node is adjacent to 0: join two of them.
            let nb = g.neighbors(0);
            edges.push((nb[0], nb[1]));
        }
    }
    Graph::from_edges(n, &edges)
}

/// Erdős–Rényi `G(n, p)` redrawn until connected and non-bipartite.
pub fn erdos_renyi_ergodic<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Graph> {
    for _ in 0..SBM_MAX_TRIES {
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.random::<f64>() < p {
                    edges.push((u, v));
                }
            }
        }
        let g = Graph::from_edges(n, &edges)?;
        if g.self_looped_nodes().is_empty() && g.is_connected() && !g.is_bipartite() {
            return Ok(g);
        }
    }
    Err(Error::invalid(format!(
        "G({n}, {p}) not ergodic after {SBM_MAX_TRIES} draws"
    )))
}

/// Graph with `n` nodes and exactly `m` distinct random edges, built on a
/// spanning tree so it is connected. Used for density sweeps.
pub fn random_graph_with_edges<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Graph> {
    if n < 2 || m + 1 < n || m > n * (n - 1) / 2 {
        return Err(Error::invalid(format!(
            "cannot place {m} edges on {n} connected nodes"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut set = std::collections::HashSet::with_capacity(m);
    for i in 1..n {
        let (a, b) = (order[i], order[rng.random_range(0..i)]);
        set.insert((a.min(b), a.max(b)));
    }
    while set.len() < m {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            set.insert((a.min(b), a.max(b)));
        }
    }
    let mut edges: Vec<_> = set.into_iter().collect();
    edges.sort_unstable();
    Graph::from_edges(n, &edges)
}

fn bfs_distances(g: &Graph, src: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; g.num_nodes()];
    dist[src] = 0;
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        for &v in g.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}
