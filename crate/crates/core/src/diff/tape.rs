//! Reverse-mode tape over dense matrices.
//!
//! Nodes are appended in evaluation order, so every parent has a smaller index
//! than its child and a reverse sweep over the node list is a valid reverse
//! topological order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::{gemm_nt_acc, gemm_tn_acc, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation with a hand-written backward rule, for fused kernels that would
/// be wasteful to express as a chain of primitive ops.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order. `None` means the
    /// op contributes nothing to that input.
    fn backward(
        &self,
        inputs: &[&Matrix],
        output: &Matrix,
        grad_output: &Matrix,
    ) -> Vec<Option<Matrix>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    EluPlusOne(Var),
    Dropout(Var, Matrix),
    RowSoftmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    SumAll(Var),
    WeightedSum(Vec<Var>, Var),
    ScaleColBlocks {
        x: Var,
        weights: Var,
        block: usize,
    },
    BlockWeightedSum {
        x: Var,
        weights: Var,
        offset: usize,
    },
    CrossEntropy {
        logits: Var,
        probs: Matrix,
        labels: Vec<usize>,
        mask: Vec<usize>,
    },
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when `v` was unreachable.
    pub fn grad_or_zeros(&self, v: Var) -> Matrix {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(self.value(v).rows(), self.value(v).cols()))
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push_unchecked(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Matrix, op: Op, parents: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::shape(op, va.shape_str(), vb.shape_str()));
        }
        Ok(())
    }

    fn check_col(&self, op: &'static str, x: Var, s: Var) -> Result<()> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vs.rows() != vx.rows() || vs.cols() != 1 {
            return Err(Error::shape(op, format!("{}x1", vx.rows()), vs.shape_str()));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// `x + 1·bias`, broadcasting a `1 × d` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(Error::shape(
                "add_row",
                format!("1x{}", vx.cols()),
                vb.shape_str(),
            ));
        }
        let mut value = vx.clone();
        for r in 0..value.rows() {
            for (o, &b) in value.row_mut(r).iter_mut().zip(vb.as_slice()) {
                *o += b;
            }
        }
        self.push("add_row", value, Op::AddRow(x, bias), &[x, bias])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("div", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push("div", value, Op::Div(a, b), &[a, b])
    }

    /// Scales row `i` of `x` by `s[i]` for an `N × 1` column `s`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_col("mul_col", x, s)?;
        let mut value = self.value(x).clone();
        let sv = self.value(s).as_slice().to_vec();
        for (r, &c) in sv.iter().enumerate() {
            value.row_mut(r).iter_mut().for_each(|v| *v *= c);
        }
        self.push("mul_col", value, Op::MulCol(x, s), &[x, s])
    }

    /// Divides row `i` of `x` by `s[i]`.
    pub fn div_col(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_col("div_col", x, s)?;
        let mut value = self.value(x).clone();
        let sv = self.value(s).as_slice().to_vec();
        for (r, &c) in sv.iter().enumerate() {
            value.row_mut(r).iter_mut().for_each(|v| *v /= c);
        }
        self.push("div_col", value, Op::DivCol(x, s), &[x, s])
    }

    pub fn mul_scalar(&mut self, x: Var, alpha: f64) -> Result<Var> {
        let value = self.value(x).scale(alpha);
        self.push("mul_scalar", value, Op::Scale(x, alpha), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push("add_scalar", value, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(x), &[x])
    }

    /// `elu(x) + 1`: `x + 1` for `x ≥ 0`, `exp(x)` otherwise.
    pub fn elu_plus_one(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(elu_plus_one);
        self.push("elu_plus_one", value, Op::EluPlusOne(x), &[x])
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let vx = self.value(x);
        let mask = Matrix::from_vec(
            vx.rows(),
            vx.cols(),
            (0..vx.len())
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect(),
        )?;
        let value = vx.zip_map(&mask, |a, m| a * m);
        self.push("dropout", value, Op::Dropout(x, mask), &[x])
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let value = row_softmax(self.value(x));
        self.push("row_softmax", value, Op::RowSoftmax(x), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols of nothing"));
        }
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let vx = self.value(x);
        if start + width > vx.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("at least {} cols", start + width),
                vx.shape_str(),
            ));
        }
        let value = vx.slice_cols(start, width);
        self.push("slice_cols", value, Op::SliceCols(x, start), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose();
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Matrix::filled(1, 1, self.value(x).sum());
        self.push("sum", value, Op::SumAll(x), &[x])
    }

    /// `Σ_k w[0, k] · xs[k]` with `w` a `1 × len(xs)` row.
    pub fn weighted_sum(&mut self, xs: &[Var], weights: Var) -> Result<Var> {
        let w = self.value(weights);
        if xs.is_empty() || w.rows() != 1 || w.cols() != xs.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("1x{}", xs.len()),
                w.shape_str(),
            ));
        }
        let first = self.value(xs[0]);
        let mut value = Matrix::zeros(first.rows(), first.cols());
        for (k, &x) in xs.iter().enumerate() {
            let vx = self.value(x);
            if !vx.same_shape(&value) {
                return Err(Error::shape(
                    "weighted_sum",
                    value.shape_str(),
                    vx.shape_str(),
                ));
            }
            value.axpy(w.as_slice()[k], vx);
        }
        let mut parents = xs.to_vec();
        parents.push(weights);
        self.push(
            "weighted_sum",
            value,
            Op::WeightedSum(xs.to_vec(), weights),
            &parents,
        )
    }

    /// Splits the columns of `x` into consecutive blocks of width `block` and
    /// scales block `b` by `w[b / h, b % h]`, where `w` is `r × h` and
    /// `r·h·block = cols(x)`.
    pub fn scale_col_blocks(&mut self, x: Var, weights: Var, block: usize) -> Result<Var> {
        let (vx, w) = (self.value(x), self.value(weights));
        if block == 0 || w.len() * block != vx.cols() {
            return Err(Error::shape(
                "scale_col_blocks",
                format!("{} weights of block {block}", vx.cols() / block.max(1)),
                w.shape_str(),
            ));
        }
        let mut value = vx.clone();
        let ws = w.as_slice();
        for r in 0..value.rows() {
            for (b, chunk) in value.row_mut(r).chunks_mut(block).enumerate() {
                chunk.iter_mut().for_each(|v| *v *= ws[b]);
            }
        }
        self.push(
            "scale_col_blocks",
            value,
            Op::ScaleColBlocks { x, weights, block },
            &[x, weights],
        )
    }

    /// `Σ_b w[0, offset + b] · block_b(x)` over column blocks of `x` with the
    /// given width. Equivalent to slicing each block and calling
    /// [`Tape::weighted_sum`], without the intermediate nodes.
    pub fn block_weighted_sum(
        &mut self,
        x: Var,
        weights: Var,
        offset: usize,
        block: usize,
    ) -> Result<Var> {
        let (vx, w) = (self.value(x), self.value(weights));
        if block == 0 || vx.cols() % block != 0 {
            return Err(Error::shape(
                "block_weighted_sum",
                format!("multiple of {block} cols"),
                vx.shape_str(),
            ));
        }
        let nblocks = vx.cols() / block;
        if w.rows() != 1 || w.cols() < offset + nblocks {
            return Err(Error::shape(
                "block_weighted_sum",
                format!("1x{} weights", offset + nblocks),
                w.shape_str(),
            ));
        }
        let ws = &w.as_slice()[offset..offset + nblocks];
        let mut value = Matrix::zeros(vx.rows(), block);
        for r in 0..vx.rows() {
            let src = vx.row(r);
            let dst = value.row_mut(r);
            for (b, chunk) in src.chunks(block).enumerate() {
                for (d, &s) in dst.iter_mut().zip(chunk) {
                    *d += ws[b] * s;
                }
            }
        }
        self.push(
            "block_weighted_sum",
            value,
            Op::BlockWeightedSum { x, weights, offset },
            &[x, weights],
        )
    }

    /// Mean negative log-likelihood of `labels[i]` under `softmax(logits[i])`
    /// over the rows listed in `mask`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], mask: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if mask.is_empty() {
            return Err(Error::invalid("cross_entropy over an empty mask"));
        }
        if labels.len() != vl.rows() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels", vl.rows()),
                format!("{}", labels.len()),
            ));
        }
        let classes = vl.cols();
        let mut loss = 0.0;
        for &i in mask {
            let y = labels[i];
            if y >= classes {
                return Err(Error::invalid(format!("label {y} outside 0..{classes}")));
            }
            let row = vl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        let probs = row_softmax(vl);
        let value = Matrix::filled(1, 1, loss / mask.len() as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
            },
            &[logits],
        )
    }

    pub fn custom(&mut self, inputs: &[Var], value: Matrix, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        self.push(name, value, Op::Custom(inputs.to_vec(), op), inputs)
    }

    /// Accumulates `∂root/∂v` into every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::shape("backward", "1x1 root", rv.shape_str()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &g);
            self.grads[idx] = Some(g);
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut self.grads[parent.0] {
                    Some(acc) => acc.axpy(1.0, &pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &Matrix) -> Vec<(Var, Matrix)> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut out = Vec::new();
                if needs(*a) {
                    let mut ga = Matrix::zeros(val(*a).rows(), val(*a).cols());
                    gemm_nt_acc(g, val(*b), &mut ga);
                    out.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = Matrix::zeros(val(*b).rows(), val(*b).cols());
                    gemm_tn_acc(val(*a), g, &mut gb);
                    out.push((*b, gb));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::AddRow(x, bias) => {
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                vec![(*x, g.clone()), (*bias, gb)]
            }
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)),
                (*b, g.zip_map(val(*a), |x, y| x * y)),
            ],
            Op::Div(a, b) => {
                let ga = g.zip_map(val(*b), |x, y| x / y);
                // ∂(a/b)/∂b = −(a/b)/b
                let q = &node.value;
                let gb = Matrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.as_slice()
                        .iter()
                        .zip(q.as_slice())
                        .zip(val(*b).as_slice())
                        .map(|((gv, qv), bv)| -gv * qv / bv)
                        .collect(),
                )
                .expect("shape");
                vec![(*a, ga), (*b, gb)]
            }
            Op::MulCol(x, s) => {
                let sv = val(*s);
                let vx = val(*x);
                let mut gx = g.clone();
                let mut gs = Matrix::zeros(sv.rows(), 1);
                for r in 0..g.rows() {
                    gs[(r, 0)] = g.row(r).iter().zip(vx.row(r)).map(|(a, b)| a * b).sum();
                    let c = sv[(r, 0)];
                    gx.row_mut(r).iter_mut().for_each(|v| *v *= c);
                }
                vec![(*x, gx), (*s, gs)]
            }
            Op::DivCol(x, s) => {
                let sv = val(*s);
                let out = &node.value;
                let mut gx = g.clone();
                let mut gs = Matrix::zeros(sv.rows(), 1);
                for r in 0..g.rows() {
                    let c = sv[(r, 0)];
                    gs[(r, 0)] = -g
                        .row(r)
                        .iter()
                        .zip(out.row(r))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / c;
                    gx.row_mut(r).iter_mut().for_each(|v| *v /= c);
                }
                vec![(*x, gx), (*s, gs)]
            }
            Op::Scale(x, alpha) => vec![(*x, g.scale(*alpha))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Relu(x) => vec![(
                *x,
                g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
            )],
            Op::EluPlusOne(x) => {
                vec![(*x, g.zip_map(val(*x), |gv, xv| gv * elu_plus_one_grad(xv)))]
            }
            Op::Dropout(x, mask) => vec![(*x, g.zip_map(mask, |a, m| a * m))],
            Op::RowSoftmax(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = val(p).cols();
                        let gp = g.slice_cols(off, w);
                        off += w;
                        (p, gp)
                    })
                    .collect()
            }
            Op::SliceCols(x, start) => {
                let vx = val(*x);
                let mut gx = Matrix::zeros(vx.rows(), vx.cols());
                let w = g.cols();
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                vec![(*x, gx)]
            }
            Op::Transpose(x) => vec![(*x, g.transpose())],
            Op::SumAll(x) => {
                let vx = val(*x);
                vec![(*x, Matrix::filled(vx.rows(), vx.cols(), g[(0, 0)]))]
            }
            Op::WeightedSum(xs, w) => {
                let wv = val(*w).as_slice();
                let mut out: Vec<(Var, Matrix)> = xs
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| (x, g.scale(wv[k])))
                    .collect();
                let gw = xs.iter().map(|&x| g.dot(val(x))).collect();
                out.push((*w, Matrix::from_vec(1, xs.len(), gw).expect("shape")));
                out
            }
            Op::ScaleColBlocks { x, weights, block } => {
                let ws = val(*weights);
                let vx = val(*x);
                let mut gx = g.clone();
                let mut gw = Matrix::zeros(ws.rows(), ws.cols());
                for r in 0..g.rows() {
                    for (b, (gchunk, xchunk)) in gx
                        .row_mut(r)
                        .chunks_mut(*block)
                        .zip(vx.row(r).chunks(*block))
                        .enumerate()
                    {
                        let mut acc = 0.0;
                        for (gv, &xv) in gchunk.iter_mut().zip(xchunk) {
                            acc += *gv * xv;
                            *gv *= ws.as_slice()[b];
                        }
                        gw.as_mut_slice()[b] += acc;
                    }
                }
                vec![(*x, gx), (*weights, gw)]
            }
            Op::BlockWeightedSum { x, weights, offset } => {
                let vx = val(*x);
                let ws = val(*weights);
                let block = g.cols();
                let nblocks = vx.cols() / block;
                let mut gx = Matrix::zeros(vx.rows(), vx.cols());
                let mut gw = Matrix::zeros(1, ws.cols());
                for r in 0..vx.rows() {
                    let grow = g.row(r);
                    let xrow = vx.row(r);
                    let gxrow = gx.row_mut(r);
                    for b in 0..nblocks {
                        let wb = ws.as_slice()[offset + b];
                        let span = b * block..(b + 1) * block;
                        let mut acc = 0.0;
                        for ((o, &gv), &xv) in
                            gxrow[span.clone()].iter_mut().zip(grow).zip(&xrow[span])
                        {
                            *o = wb * gv;
                            acc += gv * xv;
                        }
                        gw.as_mut_slice()[offset + b] += acc;
                    }
                }
                vec![(*x, gx), (*weights, gw)]
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                mask,
            } => {
                let scale = g[(0, 0)] / mask.len() as f64;
                let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                for &i in mask {
                    let row = gl.row_mut(i);
                    for (o, &p) in row.iter_mut().zip(probs.row(i)) {
                        *o += scale * p;
                    }
                    row[labels[i]] -= scale;
                }
                vec![(*logits, gl)]
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Matrix> = inputs.iter().map(|&v| val(v)).collect();
                op.backward(&ins, &node.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gi, &v)| gi.map(|m| (v, m)))
                    .collect()
            }
        }
    }
}

#[inline]
pub fn elu_plus_one(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

#[inline]
pub fn elu_plus_one_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

pub fn row_softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}
