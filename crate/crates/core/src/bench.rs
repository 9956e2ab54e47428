//! Wall-time harness for the efficient and dense STA paths.
//!
//! Every measurement discards one warm-up sample and reports the median of
//! `repeats` timed samples. A sample repeats the call until it spans at least
//! [`MIN_SAMPLE_SECS`] so sub-millisecond runs are not dominated by timer
//! jitter; the reported figure is per call.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{sta_all_hops, sta_all_hops_dense, DEFAULT_EPS};
use crate::config::BenchConfig;
use crate::data::random_graph_with_edges;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::Matrix;
use crate::rng;

pub const MIN_SAMPLE_SECS: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaPath {
    Efficient,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Edges,
    Nodes,
    Hops,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub sweep: Sweep,
    pub path: StaPath,
    pub nodes: usize,
    pub edges: usize,
    pub hops: usize,
    pub dim: usize,
    pub heads: usize,
    pub seconds: f64,
}

/// Median seconds per call of `f`.
pub fn time_median(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::invalid("need at least one timed repeat"));
    }
    let warm = Instant::now();
    f()?;
    let once = warm.elapsed().as_secs_f64();
    let iters = if once >= MIN_SAMPLE_SECS {
        1
    } else {
        ((MIN_SAMPLE_SECS / once.max(1e-7)).ceil() as usize).clamp(1, 100_000)
    };
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        for _ in 0..iters {
            f()?;
        }
        samples.push(t.elapsed().as_secs_f64() / iters as f64);
    }
    samples.sort_by(f64::total_cmp);
    let mid = samples.len() / 2;
    Ok(if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        (samples[mid - 1] + samples[mid]) / 2.0
    })
}

fn qkv(n: usize, dim: usize, seed: u64) -> (Matrix, Matrix, Matrix) {
    let mut r = rng::seeded(seed);
    (
        Matrix::random_uniform(n, dim, -1.0, 1.0, &mut r),
        Matrix::random_uniform(n, dim, -1.0, 1.0, &mut r),
        Matrix::random_uniform(n, dim, -1.0, 1.0, &mut r),
    )
}

struct Case {
    graph: Arc<Graph>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
}

impl Case {
    fn new(n: usize, m: usize, dim: usize, seed: u64) -> Result<Self> {
        let graph = Arc::new(random_graph_with_edges(
            n,
            m,
            &mut rng::derive(seed, m as u64),
        )?);
        let (q, k, v) = qkv(n, dim, seed);
        Ok(Self { graph, q, k, v })
    }

    fn time(
        &self,
        sweep: Sweep,
        path: StaPath,
        hops: usize,
        heads: usize,
        repeats: usize,
    ) -> Result<BenchRow> {
        let seconds = match path {
            StaPath::Efficient => time_median(repeats, || {
                sta_all_hops(&self.graph, hops, heads, &self.q, &self.k, &self.v).map(drop)
            })?,
            StaPath::Dense => time_median(repeats, || {
                // One single-head dense evaluation per head slice.
                let dh = self.q.cols() / heads;
                for h in 0..heads {
                    let s = |m: &Matrix| m.slice_cols(h * dh, dh);
                    sta_all_hops_dense(
                        &self.graph,
                        hops,
                        &s(&self.q),
                        &s(&self.k),
                        &s(&self.v),
                        DEFAULT_EPS,
                    )?;
                }
                Ok(())
            })?,
        };
        let row = BenchRow {
            sweep,
            path,
            nodes: self.graph.num_nodes(),
            edges: self.graph.num_edges(),
            hops,
            dim: self.q.cols(),
            heads,
            seconds,
        };
        log::info!("{row:?}");
        Ok(row)
    }
}

/// Efficient path at fixed `N`, one row per edge count.
pub fn edge_sweep(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    cfg.edge_counts
        .iter()
        .map(|&m| {
            Case::new(cfg.nodes, m, cfg.dim, seed)?.time(
                Sweep::Edges,
                StaPath::Efficient,
                cfg.hops,
                cfg.heads,
                cfg.repeats,
            )
        })
        .collect()
}

/// Both paths at fixed average degree, one pair of rows per node count.
pub fn node_sweep(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &n in &cfg.dense_nodes {
        let case = Case::new(n, n * cfg.avg_degree / 2, cfg.dim, seed)?;
        for path in [StaPath::Efficient, StaPath::Dense] {
            rows.push(case.time(Sweep::Nodes, path, cfg.hops, cfg.heads, cfg.repeats)?);
        }
    }
    Ok(rows)
}

/// Efficient path on the first fixed-`N` graph, one row per hop count.
pub fn hop_sweep(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    let m = *cfg
        .edge_counts
        .first()
        .ok_or_else(|| Error::invalid("hop sweep needs an edge count"))?;
    let case = Case::new(cfg.nodes, m, cfg.dim, seed)?;
    cfg.hop_sweep
        .iter()
        .map(|&k| case.time(Sweep::Hops, StaPath::Efficient, k, cfg.heads, cfg.repeats))
        .collect()
}

pub fn run_all(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = edge_sweep(cfg, seed)?;
    rows.extend(node_sweep(cfg, seed)?);
    rows.extend(hop_sweep(cfg, seed)?);
    Ok(rows)
}

/// Writes `rows` as CSV, each row tagged with the run seed and config hash.
pub fn write_csv<W: Write>(rows: &[BenchRow], seed: u64, config_hash: &str, out: W) -> Result<()> {
    #[derive(Serialize)]
    struct Tagged<'a> {
        seed: u64,
        config_hash: &'a str,
        sweep: Sweep,
        path: StaPath,
        nodes: usize,
        edges: usize,
        hops: usize,
        dim: usize,
        heads: usize,
        seconds: f64,
    }
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(Tagged {
            seed,
            config_hash,
            sweep: r.sweep,
            path: r.path,
            nodes: r.nodes,
            edges: r.edges,
            hops: r.hops,
            dim: r.dim,
            heads: r.heads,
            seconds: r.seconds,
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))?;
    Ok(())
}

/// Ratios read off a set of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSummary {
    /// Efficient time ratio between consecutive edge counts.
    pub edge_doubling: Vec<f64>,
    /// Time ratio between consecutive node counts, per path.
    pub efficient_node_growth: Vec<f64>,
    pub dense_node_growth: Vec<f64>,
    /// Hop sweep times never decrease with `K`.
    pub monotone_in_hops: bool,
}

fn consecutive_ratios<'a>(rows: impl Iterator<Item = &'a BenchRow>) -> Vec<f64> {
    let t: Vec<f64> = rows.map(|r| r.seconds).collect();
    t.windows(2).map(|w| w[1] / w[0]).collect()
}

pub fn summarize(rows: &[BenchRow]) -> ScalingSummary {
    let pick = |s: Sweep, p: StaPath| rows.iter().filter(move |r| r.sweep == s && r.path == p);
    let hops: Vec<f64> = pick(Sweep::Hops, StaPath::Efficient)
        .map(|r| r.seconds)
        .collect();
    ScalingSummary {
        edge_doubling: consecutive_ratios(pick(Sweep::Edges, StaPath::Efficient)),
        efficient_node_growth: consecutive_ratios(pick(Sweep::Nodes, StaPath::Efficient)),
        dense_node_growth: consecutive_ratios(pick(Sweep::Nodes, StaPath::Dense)),
        monotone_in_hops: hops.windows(2).all(|w| w[1] >= w[0]),
    }
}
