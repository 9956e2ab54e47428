//! Undirected graphs in CSR form and the transition operators built on them.
//!
//! The random-walk operator is `Â = A·D⁻¹`, so `Â_ij = A_ij / d(j)` and every
//! column of `Â` sums to one. Propagation `Â·M` is one pass over the stored
//! (directed) edge list.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Above this node count the dense spectral routines are skipped by the CLI.
pub const SPECTRAL_NODE_LIMIT: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransitionKind {
    /// `A·D⁻¹`, column-stochastic.
    RandomWalk,
    /// `D^(-1/2)·A·D^(-1/2)`.
    SymmetricNormalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    degrees: Vec<usize>,
    inv_degrees: Vec<f64>,
    self_looped: Vec<usize>,
}

impl Graph {
    /// Symmetrises and deduplicates `edges`, dropping input self-loops.
    ///
    /// Nodes left without neighbours get a single self-loop so that `A·D⁻¹`
    /// stays defined; they are listed by [`Graph::self_looped_nodes`] and
    /// reported through `log::warn!`.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::NodeOutOfRange { u, v, num_nodes });
            }
            if u == v {
                continue;
            }
            adj[u].push(v);
            adj[v].push(u);
        }
        let mut self_looped = Vec::new();
        for (i, nbrs) in adj.iter_mut().enumerate() {
            nbrs.sort_unstable();
            nbrs.dedup();
            if nbrs.is_empty() {
                nbrs.push(i);
                self_looped.push(i);
            }
        }
        if !self_looped.is_empty() {
            log::warn!(
                "{} isolated node(s) given a self-loop (first: {})",
                self_looped.len(),
                self_looped[0]
            );
        }

        let mut row_offsets = Vec::with_capacity(num_nodes + 1);
        let mut col_indices = Vec::with_capacity(adj.iter().map(Vec::len).sum());
        row_offsets.push(0);
        for nbrs in &adj {
            col_indices.extend_from_slice(nbrs);
            row_offsets.push(col_indices.len());
        }
        let degrees: Vec<usize> = adj.iter().map(Vec::len).collect();
        let inv_degrees = degrees.iter().map(|&d| 1.0 / d as f64).collect();
        Ok(Self {
            num_nodes,
            row_offsets,
            col_indices,
            degrees,
            inv_degrees,
            self_looped,
        })
    }

    /// Reads a whitespace-separated edge list. `#` starts a comment line.
    /// When `num_nodes` is `None` it is one past the largest id seen.
    pub fn read_edge_list(path: &Path, num_nodes: Option<usize>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let edges = parse_edge_list(&text, path)?;
        let n = num_nodes
            .unwrap_or_else(|| edges.iter().map(|&(u, v)| u.max(v) + 1).max().unwrap_or(0));
        Self::from_edges(n, &edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of undirected edges, counting an added self-loop once.
    pub fn num_edges(&self) -> usize {
        (self.col_indices.len() + self.self_looped.len()) / 2
    }

    /// Stored adjacency entries (`2|E|` plus one per self-loop).
    pub fn num_entries(&self) -> usize {
        self.col_indices.len()
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn degree(&self, i: usize) -> usize {
        self.degrees[i]
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[i]..self.row_offsets[i + 1]]
    }

    pub fn self_looped_nodes(&self) -> &[usize] {
        &self.self_looped
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes)
            .flat_map(|i| {
                self.neighbors(i)
                    .iter()
                    .filter(move |&&j| i < j)
                    .map(move |&j| (i, j))
            })
            .collect()
    }

    /// Relabels nodes so that old node `perm[new]` becomes `new`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_nodes {
            return Err(Error::shape(
                "Graph::permuted",
                format!("{}", self.num_nodes),
                format!("{}", perm.len()),
            ));
        }
        let mut inverse = vec![usize::MAX; self.num_nodes];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let edges: Vec<_> = self
            .edges()
            .into_iter()
            .map(|(u, v)| (inverse[u], inverse[v]))
            .collect();
        Self::from_edges(self.num_nodes, &edges)
    }

    /// `Â·M` for the chosen operator.
    pub fn propagate(&self, kind: TransitionKind, m: &Matrix) -> Result<Matrix> {
        if m.rows() != self.num_nodes {
            return Err(Error::shape(
                "propagate",
                format!("{} rows", self.num_nodes),
                format!("{} rows", m.rows()),
            ));
        }
        let mut out = Matrix::zeros(m.rows(), m.cols());
        match kind {
            TransitionKind::RandomWalk => {
                self.random_walk_into(m.as_slice(), m.cols(), out.as_mut_slice())
            }
            TransitionKind::SymmetricNormalized => {
                let w = m.cols();
                let src = m.as_slice();
                let dst = out.as_mut_slice();
                for i in 0..self.num_nodes {
                    let di = self.inv_degrees[i].sqrt();
                    let drow = &mut dst[i * w..(i + 1) * w];
                    for &j in self.neighbors(i) {
                        let c = di * self.inv_degrees[j].sqrt();
                        axpy(drow, c, &src[j * w..(j + 1) * w]);
                    }
                }
            }
        }
        Ok(out)
    }

    /// `dst = A·D⁻¹·src` on raw row-major buffers of width `w`.
    ///
    /// Each destination row is accumulated over its neighbours in CSR order,
    /// so the result does not depend on how rows might be scheduled.
    pub fn random_walk_into(&self, src: &[f64], w: usize, dst: &mut [f64]) {
        debug_assert_eq!(src.len(), self.num_nodes * w);
        debug_assert_eq!(dst.len(), self.num_nodes * w);
        for i in 0..self.num_nodes {
            let drow = &mut dst[i * w..(i + 1) * w];
            drow.fill(0.0);
            for &j in self.neighbors(i) {
                axpy(drow, self.inv_degrees[j], &src[j * w..(j + 1) * w]);
            }
        }
    }

    /// `dst = (A·D⁻¹)ᵀ·src = D⁻¹·A·src`, the adjoint of [`Graph::random_walk_into`].
    pub fn random_walk_transpose_into(&self, src: &[f64], w: usize, dst: &mut [f64]) {
        for i in 0..self.num_nodes {
            let drow = &mut dst[i * w..(i + 1) * w];
            drow.fill(0.0);
            for &j in self.neighbors(i) {
                axpy(drow, 1.0, &src[j * w..(j + 1) * w]);
            }
            let s = self.inv_degrees[i];
            drow.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Dense transition matrix. Used by oracles and the spectral checks only.
    pub fn dense_transition(&self, kind: TransitionKind) -> Matrix {
        let n = self.num_nodes;
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for &j in self.neighbors(i) {
                a[(i, j)] = match kind {
                    TransitionKind::RandomWalk => self.inv_degrees[j],
                    TransitionKind::SymmetricNormalized => {
                        (self.inv_degrees[i] * self.inv_degrees[j]).sqrt()
                    }
                };
            }
        }
        a
    }

    /// `π_i = d(i) / Σ_j d(j)`.
    pub fn stationary_distribution(&self) -> Vec<f64> {
        let total: usize = self.degrees.iter().sum();
        self.degrees
            .iter()
            .map(|&d| d as f64 / total as f64)
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        if self.num_nodes == 0 {
            return true;
        }
        let mut seen = vec![false; self.num_nodes];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in self.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.num_nodes
    }

    /// Two-colouring over every component. A self-loop is an odd cycle.
    pub fn is_bipartite(&self) -> bool {
        let mut color = vec![u8::MAX; self.num_nodes];
        for start in 0..self.num_nodes {
            if color[start] != u8::MAX {
                continue;
            }
            color[start] = 0;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in self.neighbors(u) {
                    if color[v] == u8::MAX {
                        color[v] = 1 - color[u];
                        queue.push_back(v);
                    } else if color[v] == color[u] {
                        return false;
                    }
                }
            }
        }
        true
    }

    pub fn spectral_info(&self) -> SpectralInfo {
        let eig = self.sym_eigen();
        let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        let is_connected = self.is_connected();
        let is_bipartite = self.is_bipartite();
        let spectral_gap = if !is_connected || is_bipartite {
            0.0
        } else {
            let second = eigenvalues.get(1).copied().unwrap_or(f64::NEG_INFINITY);
            let last = eigenvalues.last().map_or(0.0, |l| l.abs());
            let rho = if eigenvalues.len() > 1 {
                second.max(last)
            } else {
                0.0
            };
            1.0 - rho
        };
        SpectralInfo {
            eigenvalues,
            spectral_gap,
            is_connected,
            is_bipartite,
        }
    }

    /// Eigenvectors of `L = I − A_sym` for the `m` smallest eigenvalues.
    ///
    /// Columns are unit-norm; each is signed so that its largest-magnitude
    /// entry (lowest index on ties) is positive.
    pub fn laplacian_pe(&self, m: usize) -> Result<Matrix> {
        let n = self.num_nodes;
        if m >= n {
            return Err(Error::invalid(format!(
                "positional encoding needs m < N (m = {m}, N = {n})"
            )));
        }
        let eig = self.sym_eigen();
        // Smallest Laplacian eigenvalues are the largest of A_sym.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let mut pe = Matrix::zeros(n, m);
        for (c, &idx) in order.iter().take(m).enumerate() {
            let v = eig.eigenvectors.column(idx);
            let norm = v.norm();
            let mut pivot = 0;
            for r in 1..n {
                if v[r].abs() > v[pivot].abs() {
                    pivot = r;
                }
            }
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            for r in 0..n {
                pe[(r, c)] = sign * v[r] / norm;
            }
        }
        Ok(pe)
    }

    fn sym_eigen(&self) -> SymmetricEigen<f64, nalgebra::Dyn> {
        let n = self.num_nodes;
        let a = self.dense_transition(TransitionKind::SymmetricNormalized);
        let dm = DMatrix::from_row_slice(n, n, a.as_slice());
        SymmetricEigen::new(dm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralInfo {
    /// Eigenvalues of `A_sym`, descending.
    pub eigenvalues: Vec<f64>,
    /// `1 − max{λ₂, |λ_N|}`; zero for disconnected or bipartite graphs.
    pub spectral_gap: f64,
    pub is_connected: bool,
    pub is_bipartite: bool,
}

pub fn parse_edge_list(text: &str, path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut next = |what: &str| -> Result<usize> {
            let tok = it.next().ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("missing {what} node id"),
            })?;
            tok.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("bad node id {tok:?}"),
            })
        };
        let u = next("source")?;
        let v = next("target")?;
        edges.push((u, v));
    }
    Ok(edges)
}

#[inline]
pub(crate) fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
