//! SubTree attention: the feature map, a dense reference implementation,
//! the linear-time multi-hop kernel, kernelized global attention, gated
//! multi-head STA and the hop aggregators.

mod kernel;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{elu_plus_one, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{Graph, TransitionKind};
use crate::matrix::Matrix;

/// Guard added to every attention denominator.
pub const DEFAULT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FeatureMapKind {
    #[default]
    EluPlusOne,
}

impl FeatureMapKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            FeatureMapKind::EluPlusOne => elu_plus_one(x),
        }
    }
}

/// `elu(x) + 1`, elementwise. Strictly positive for finite input.
pub fn feature_map(m: &Matrix) -> Matrix {
    m.map(|x| FeatureMapKind::EluPlusOne.apply(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    SoftmaxGate,
    RawGate,
    NoGate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    Gpr,
    Sum,
    Concat,
    AttnReadout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaConfig {
    pub hops: usize,
    pub heads: usize,
    /// Per-head width; keys and values share it.
    pub head_dim: usize,
    pub gate_mode: GateMode,
    pub aggregation: Aggregation,
    pub eps: f64,
}

impl StaConfig {
    pub fn new(hops: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            hops,
            heads,
            head_dim,
            gate_mode: GateMode::SoftmaxGate,
            aggregation: Aggregation::Gpr,
            eps: DEFAULT_EPS,
        }
    }

    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::invalid(format!(
                "heads ({}) and head_dim ({}) must be positive",
                self.heads, self.head_dim
            )));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid(format!(
                "denominator epsilon must be finite and ≥ 0, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Learnable tensors of one STA block.
#[derive(Debug, Clone, PartialEq)]
pub struct StaParams {
    /// `K × H`; absent under [`GateMode::NoGate`].
    pub gates: Option<Matrix>,
    /// `1 × (K+1)`, α₀ first.
    pub gpr_weights: Matrix,
    /// `hidden × hidden`.
    pub output_projection: Matrix,
    /// `1 × 2·hidden`, only for [`Aggregation::AttnReadout`].
    pub readout_projection: Option<Matrix>,
    /// `(K+1)·hidden × hidden`, only for [`Aggregation::Concat`].
    pub concat_projection: Option<Matrix>,
    /// `1 × 1`, only for the global-attention hybrid.
    pub teleport: Option<Matrix>,
}

pub const GATES: &str = "sta.gates";
pub const GPR_WEIGHTS: &str = "sta.gpr_weights";
pub const OUTPUT_PROJECTION: &str = "sta.w_o";
pub const READOUT_PROJECTION: &str = "sta.w_a";
pub const CONCAT_PROJECTION: &str = "sta.w_concat";
pub const TELEPORT: &str = "sta.teleport";

impl StaParams {
    /// Softmax gates start at 0 (uniform over heads). Raw gates start at 1 so
    /// the block is not silenced at initialisation. α and α_T start at 1.
    pub fn init<R: Rng + ?Sized>(cfg: &StaConfig, with_teleport: bool, rng: &mut R) -> Self {
        let hidden = cfg.hidden();
        let gates = match cfg.gate_mode {
            GateMode::SoftmaxGate => Some(Matrix::zeros(cfg.hops, cfg.heads)),
            GateMode::RawGate => Some(Matrix::filled(cfg.hops, cfg.heads, 1.0)),
            GateMode::NoGate => None,
        };
        let output_projection = Matrix::glorot(hidden, hidden, rng);
        let readout_projection = (cfg.aggregation == Aggregation::AttnReadout)
            .then(|| Matrix::glorot(2 * hidden, 1, rng).transpose());
        let concat_projection = (cfg.aggregation == Aggregation::Concat)
            .then(|| Matrix::glorot((cfg.hops + 1) * hidden, hidden, rng));
        Self {
            gates,
            gpr_weights: Matrix::filled(1, cfg.hops + 1, 1.0),
            output_projection,
            readout_projection,
            concat_projection,
            teleport: with_teleport.then(|| Matrix::filled(1, 1, 1.0)),
        }
    }

    /// Present tensors with their canonical names.
    pub fn named(&self) -> Vec<(&'static str, Matrix)> {
        let mut out = Vec::new();
        if let Some(g) = &self.gates {
            out.push((GATES, g.clone()));
        }
        out.push((GPR_WEIGHTS, self.gpr_weights.clone()));
        out.push((OUTPUT_PROJECTION, self.output_projection.clone()));
        if let Some(w) = &self.readout_projection {
            out.push((READOUT_PROJECTION, w.clone()));
        }
        if let Some(w) = &self.concat_projection {
            out.push((CONCAT_PROJECTION, w.clone()));
        }
        if let Some(t) = &self.teleport {
            out.push((TELEPORT, t.clone()));
        }
        out
    }

    /// Puts every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> StaVars {
        let named = self.named();
        let names: Vec<String> = named.iter().map(|(n, _)| n.to_string()).collect();
        let vars: Vec<Var> = named.into_iter().map(|(_, m)| tape.param(m)).collect();
        StaVars::from_named(&names, &vars).expect("own names are complete")
    }
}

/// Tape handles for [`StaParams`].
#[derive(Debug, Clone, Copy)]
pub struct StaVars {
    pub gates: Option<Var>,
    pub gpr_weights: Var,
    pub output_projection: Var,
    pub readout_projection: Option<Var>,
    pub concat_projection: Option<Var>,
    pub teleport: Option<Var>,
}

impl StaVars {
    /// Looks the STA tensors up by name among bound parameters.
    pub fn from_named(names: &[String], vars: &[Var]) -> Result<Self> {
        let find = |n: &str| names.iter().position(|x| x == n).map(|i| vars[i]);
        let required =
            |n: &str| find(n).ok_or_else(|| Error::invalid(format!("missing parameter {n}")));
        Ok(Self {
            gates: find(GATES),
            gpr_weights: required(GPR_WEIGHTS)?,
            output_projection: required(OUTPUT_PROJECTION)?,
            readout_projection: find(READOUT_PROJECTION),
            concat_projection: find(CONCAT_PROJECTION),
            teleport: find(TELEPORT),
        })
    }
}

fn check_qkv(op: &'static str, n: usize, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    for m in [q, k, v] {
        if m.rows() != n {
            return Err(Error::shape(op, format!("{n} rows"), m.shape_str()));
        }
    }
    if q.cols() != k.cols() {
        return Err(Error::shape(
            op,
            format!("K with {} cols", q.cols()),
            k.shape_str(),
        ));
    }
    Ok(())
}

/// Normalised attention with an explicit `N × N` mask:
/// `out_i = Σ_j M_ij s_ij V_j / (Σ_j M_ij s_ij + ε)`, `s_ij = φ(Q_i)·φ(K_j)`.
fn masked_attention(mask: &Matrix, q: &Matrix, k: &Matrix, v: &Matrix, eps: f64) -> Matrix {
    let (fq, fk) = (feature_map(q), feature_map(k));
    let n = q.rows();
    let mut out = Matrix::zeros(n, v.cols());
    for i in 0..n {
        let mut den = 0.0;
        let qi = fq.row(i);
        // Zero mask entries are not skipped: this is the quadratic reference.
        for j in 0..n {
            let m = mask[(i, j)];
            let w = m * qi.iter().zip(fk.row(j)).map(|(a, b)| a * b).sum::<f64>();
            den += w;
            crate::graph::axpy(out.row_mut(i), w, v.row(j));
        }
        out.row_mut(i).iter_mut().for_each(|x| *x /= den + eps);
    }
    out
}

/// Reference STA_k built from the dense power `(A·D⁻¹)^k`. Quadratic in N.
pub fn sta_k_dense_oracle(
    g: &Graph,
    k: usize,
    q: &Matrix,
    kk: &Matrix,
    v: &Matrix,
) -> Result<Matrix> {
    check_qkv("sta_k_dense_oracle", g.num_nodes(), q, kk, v)?;
    if k == 0 {
        return Ok(v.clone());
    }
    let a = g.dense_transition(TransitionKind::RandomWalk);
    let mut p = a.clone();
    for _ in 1..k {
        p = a.matmul(&p)?;
    }
    Ok(masked_attention(&p, q, kk, v, DEFAULT_EPS))
}

/// Dense STA_0..STA_hops for a single head, sharing the power sequence.
pub fn sta_all_hops_dense(
    g: &Graph,
    hops: usize,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    eps: f64,
) -> Result<Vec<Matrix>> {
    check_qkv("sta_all_hops_dense", g.num_nodes(), q, k, v)?;
    let a = g.dense_transition(TransitionKind::RandomWalk);
    let mut out = vec![v.clone()];
    let mut p = Matrix::identity(g.num_nodes());
    for _ in 0..hops {
        p = a.matmul(&p)?;
        out.push(masked_attention(&p, q, k, v, eps));
    }
    Ok(out)
}

/// Fused STA_1..STA_hops for all heads as one tape node.
///
/// The result is `N × hops·H·d_v`; hop `k` (1-based) occupies columns
/// `(k−1)·H·d_v ..`, head `h` within it columns `h·d_v ..`.
#[allow(clippy::too_many_arguments)]
pub fn sta_hops_stacked(
    tape: &mut Tape,
    g: &Arc<Graph>,
    hops: usize,
    heads: usize,
    eps: f64,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    let (value, dens) = kernel::forward(
        g,
        tape.value(q),
        tape.value(k),
        tape.value(v),
        hops,
        heads,
        eps,
    )?;
    if cfg!(debug_assertions) {
        debug_assert!(
            dens.iter().all(|&d| d > eps),
            "attention denominator at or below the guard"
        );
    }
    let op = kernel::StaHopsOp {
        graph: Arc::clone(g),
        hops,
        heads,
        dens,
    };
    tape.custom(&[q, k, v], value, Box::new(op))
}

/// STA_0..STA_K (`V` first). Each hop output is `N × H·d_v` with heads side by side.
pub fn sta_all_hops_efficient(
    tape: &mut Tape,
    g: &Arc<Graph>,
    cfg: &StaConfig,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    let stacked = sta_hops_stacked(tape, g, cfg.hops, cfg.heads, cfg.eps, q, k, v)?;
    let width = tape.value(v).cols();
    let mut out = vec![v];
    for hop in 0..cfg.hops {
        out.push(tape.slice_cols(stacked, hop * width, width)?);
    }
    Ok(out)
}

/// Matrix-level convenience around [`sta_all_hops_efficient`].
pub fn sta_all_hops(
    g: &Arc<Graph>,
    hops: usize,
    heads: usize,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
) -> Result<Vec<Matrix>> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let stacked = sta_hops_stacked(&mut tape, g, hops, heads, DEFAULT_EPS, qv, kv, vv)?;
    let stacked = tape.value(stacked);
    let width = v.cols();
    let mut out = vec![v.clone()];
    out.extend((0..hops).map(|hop| stacked.slice_cols(hop * width, width)));
    Ok(out)
}

/// Single-head kernelized global attention, built from tape primitives so it
/// is linear in N.
fn global_sa_head(tape: &mut Tape, q: Var, k: Var, v: Var, eps: f64) -> Result<Var> {
    let n = tape.value(q).rows();
    let fq = tape.elu_plus_one(q)?;
    let fk = tape.elu_plus_one(k)?;
    let fkt = tape.transpose(fk)?;
    let kv = tape.matmul(fkt, v)?;
    let ones = tape.constant(Matrix::filled(n, 1, 1.0));
    let ksum = tape.matmul(fkt, ones)?;
    let num = tape.matmul(fq, kv)?;
    let den = tape.matmul(fq, ksum)?;
    let den = tape.add_scalar(den, eps)?;
    tape.div_col(num, den)
}

/// Kernelized global attention; with `heads > 1` the columns are split into
/// equal heads and the per-head outputs concatenated.
pub fn global_sa(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, eps: f64) -> Result<Var> {
    let (qm, km, vm) = (tape.value(q), tape.value(k), tape.value(v));
    check_qkv("global_sa", qm.rows(), qm, km, vm)?;
    if heads == 0 || qm.cols() % heads != 0 || vm.cols() % heads != 0 {
        return Err(Error::invalid(format!(
            "widths {} and {} must split into {heads} heads",
            qm.cols(),
            vm.cols()
        )));
    }
    if heads == 1 {
        return global_sa_head(tape, q, k, v, eps);
    }
    let (dk, dv) = (qm.cols() / heads, vm.cols() / heads);
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dv, dv)?;
        parts.push(global_sa_head(tape, qh, kh, vh, eps)?);
    }
    tape.concat_cols(&parts)
}

/// Matrix-level single-head global attention.
pub fn global_sa_matrix(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = global_sa(&mut tape, qv, kv, vv, 1, DEFAULT_EPS)?;
    Ok(tape.value(out).clone())
}

/// Global attention with a weight per source node:
/// `out_i = Σ_j w_j s_ij V_j / (Σ_j w_j s_ij + ε)`. Linear in N.
pub fn global_sa_source_weighted(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    weights: &[f64],
) -> Result<Matrix> {
    check_qkv("global_sa_source_weighted", q.rows(), q, k, v)?;
    if weights.len() != q.rows() {
        return Err(Error::shape(
            "global_sa_source_weighted",
            format!("{} weights", q.rows()),
            weights.len().to_string(),
        ));
    }
    let (fq, fk) = (feature_map(q), feature_map(k));
    let (dk, dv) = (q.cols(), v.cols());
    let mut kv = Matrix::zeros(dk, dv);
    let mut ksum = vec![0.0; dk];
    for (j, &w) in weights.iter().enumerate() {
        for (a, &ka) in fk.row(j).iter().enumerate() {
            ksum[a] += w * ka;
            crate::graph::axpy(kv.row_mut(a), w * ka, v.row(j));
        }
    }
    let mut out = fq.matmul(&kv)?;
    for i in 0..q.rows() {
        let den: f64 = fq.row(i).iter().zip(&ksum).map(|(a, b)| a * b).sum::<f64>() + DEFAULT_EPS;
        out.row_mut(i).iter_mut().for_each(|x| *x /= den);
    }
    Ok(out)
}

/// Global attention weighted per source node by the stationary distribution
/// `π_j = d(j) / Σ d`.
pub fn global_sa_pi(g: &Graph, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    check_qkv("global_sa_pi", g.num_nodes(), q, k, v)?;
    global_sa_source_weighted(q, k, v, &g.stationary_distribution())
}

/// Per-hop gate weights `K × H` as a tape node, or `None` when ungated.
pub fn gate_weights(tape: &mut Tape, cfg: &StaConfig, vars: &StaVars) -> Result<Option<Var>> {
    match (cfg.gate_mode, vars.gates) {
        (GateMode::NoGate, _) => Ok(None),
        (GateMode::SoftmaxGate, Some(g)) => Ok(Some(tape.row_softmax(g)?)),
        (GateMode::RawGate, Some(g)) => Ok(Some(g)),
        (_, None) => Err(Error::invalid("gate mode requires gate parameters")),
    }
}

fn gated_stacked(
    tape: &mut Tape,
    g: &Arc<Graph>,
    cfg: &StaConfig,
    vars: &StaVars,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    cfg.validate()?;
    let hidden = cfg.hidden();
    for (name, x) in [("Q", q), ("K", k), ("V", v)] {
        let m = tape.value(x);
        if m.cols() != hidden {
            return Err(Error::shape(
                "msta",
                format!("{name} with {hidden} cols"),
                m.shape_str(),
            ));
        }
    }
    let stacked = sta_hops_stacked(tape, g, cfg.hops, cfg.heads, cfg.eps, q, k, v)?;
    match gate_weights(tape, cfg, vars)? {
        Some(w) => tape.scale_col_blocks(stacked, w, cfg.head_dim),
        None => Ok(stacked),
    }
}

/// Gated multi-head STA. Returns `[V, MSTA_1, …, MSTA_K]`, each `N × hidden`.
pub fn msta(
    tape: &mut Tape,
    g: &Arc<Graph>,
    cfg: &StaConfig,
    vars: &StaVars,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Vec<Var>> {
    let gated = gated_stacked(tape, g, cfg, vars, q, k, v)?;
    let hidden = cfg.hidden();
    let mut out = vec![v];
    for hop in 0..cfg.hops {
        let block = tape.slice_cols(gated, hop * hidden, hidden)?;
        out.push(tape.matmul(block, vars.output_projection)?);
    }
    Ok(out)
}

/// `Σ_k α_k·MSTA_k` without materialising the per-hop projections: the gated
/// hop blocks are mixed first and projected by `W_O` once. Equal to
/// [`msta`] followed by GPR aggregation.
pub fn msta_gpr(
    tape: &mut Tape,
    g: &Arc<Graph>,
    cfg: &StaConfig,
    vars: &StaVars,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    let hidden = cfg.hidden();
    let base = tape.block_weighted_sum(v, vars.gpr_weights, 0, hidden)?;
    if cfg.hops == 0 {
        return Ok(base);
    }
    let gated = gated_stacked(tape, g, cfg, vars, q, k, v)?;
    let mixed = tape.block_weighted_sum(gated, vars.gpr_weights, 1, hidden)?;
    let projected = tape.matmul(mixed, vars.output_projection)?;
    tape.add(base, projected)
}

/// Combines `[out_0, …, out_K]` into one `N × hidden` node.
pub fn aggregate_hops(
    tape: &mut Tape,
    outputs: &[Var],
    cfg: &StaConfig,
    vars: &StaVars,
) -> Result<Var> {
    let first = *outputs
        .first()
        .ok_or_else(|| Error::invalid("aggregate_hops needs at least one output"))?;
    let shape = tape.value(first).shape();
    for &o in outputs {
        if tape.value(o).shape() != shape {
            return Err(Error::shape(
                "aggregate_hops",
                format!("{}x{}", shape.0, shape.1),
                tape.value(o).shape_str(),
            ));
        }
    }
    match cfg.aggregation {
        Aggregation::Gpr => tape.weighted_sum(outputs, vars.gpr_weights),
        Aggregation::Sum => {
            let ones = tape.constant(Matrix::filled(1, outputs.len(), 1.0));
            tape.weighted_sum(outputs, ones)
        }
        Aggregation::Concat => {
            let w = vars
                .concat_projection
                .ok_or_else(|| Error::invalid("concat aggregation requires a projection"))?;
            let cat = tape.concat_cols(outputs)?;
            tape.matmul(cat, w)
        }
        Aggregation::AttnReadout => {
            if outputs.len() == 1 {
                return Ok(first);
            }
            let w = vars
                .readout_projection
                .ok_or_else(|| Error::invalid("attention readout requires a projection"))?;
            let wt = tape.transpose(w)?;
            let mut scores = Vec::with_capacity(outputs.len() - 1);
            for &o in &outputs[1..] {
                let pair = tape.concat_cols(&[first, o])?;
                scores.push(tape.matmul(pair, wt)?);
            }
            let scores = tape.concat_cols(&scores)?;
            let beta = tape.row_softmax(scores)?;
            let mut acc = first;
            for (idx, &o) in outputs[1..].iter().enumerate() {
                let b = tape.slice_cols(beta, idx, 1)?;
                let weighted = tape.mul_col(o, b)?;
                acc = tape.add(acc, weighted)?;
            }
            Ok(acc)
        }
    }
}
