//! Fused multi-hop kernel for the efficient STA path.
//!
//! Per node and head the propagated state is the `d_k × d_v` block
//! `φ(K_i)ᵀ V_i` followed by the `d_k` vector `φ(K_i)`, so one sparse pass of
//! `A·D⁻¹` over a row of width `H·d_k·(d_v + 1)` advances both summations by a
//! hop. After hop `k` the output row is `φ(Q_i)·S_k(i) / (φ(Q_i)·z_k(i) + ε)`.
//!
//! The backward pass never stores the per-hop states. It recomputes them in a
//! forward sweep to get `∂φ(Q)`, then runs the adjoint recursion
//! `R ← (A·D⁻¹)ᵀ (R + C_k)` from the last hop down to recover `∂φ(K)` and
//! `∂V`. Memory stays at two state buffers regardless of the hop count.

use std::sync::Arc;

use crate::diff::{elu_plus_one, elu_plus_one_grad, CustomOp};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy)]
struct Dims {
    n: usize,
    heads: usize,
    dk: usize,
    dv: usize,
}

impl Dims {
    fn head_state(&self) -> usize {
        self.dk * (self.dv + 1)
    }

    fn state_width(&self) -> usize {
        self.heads * self.head_state()
    }

    /// Output columns per hop.
    fn hop_width(&self) -> usize {
        self.heads * self.dv
    }
}

fn dims(g: &Graph, q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Result<Dims> {
    let n = g.num_nodes();
    if heads == 0 {
        return Err(Error::invalid("head count must be at least 1"));
    }
    for (name, m) in [("Q", q), ("K", k), ("V", v)] {
        if m.rows() != n {
            return Err(Error::shape(
                "sta",
                format!("{name} with {n} rows"),
                m.shape_str(),
            ));
        }
    }
    if q.cols() != k.cols() {
        return Err(Error::shape(
            "sta",
            format!("K with {} cols", q.cols()),
            k.shape_str(),
        ));
    }
    if !q.cols().is_multiple_of(heads) || !v.cols().is_multiple_of(heads) {
        return Err(Error::invalid(format!(
            "widths {} (Q/K) and {} (V) must be divisible by {heads} heads",
            q.cols(),
            v.cols()
        )));
    }
    Ok(Dims {
        n,
        heads,
        dk: q.cols() / heads,
        dv: v.cols() / heads,
    })
}

/// Writes `[φ(K_i)ᵀ V_i | φ(K_i)]` per head into a fresh state buffer.
fn initial_state(d: Dims, phi_k: &Matrix, v: &Matrix) -> Vec<f64> {
    let w = d.state_width();
    let hs = d.head_state();
    let mut state = vec![0.0; d.n * w];
    for i in 0..d.n {
        let krow = phi_k.row(i);
        let vrow = v.row(i);
        for h in 0..d.heads {
            let base = i * w + h * hs;
            let kh = &krow[h * d.dk..(h + 1) * d.dk];
            let vh = &vrow[h * d.dv..(h + 1) * d.dv];
            for (a, &ka) in kh.iter().enumerate() {
                let block = &mut state[base + a * d.dv..base + (a + 1) * d.dv];
                for (s, &vb) in block.iter_mut().zip(vh) {
                    *s = ka * vb;
                }
            }
            state[base + d.dk * d.dv..base + hs].copy_from_slice(kh);
        }
    }
    state
}

/// Forward pass. Returns the stacked outputs (`N × hops·H·d_v`, hop-major,
/// then head, then value column) and the denominators (`N × hops × H`).
pub(crate) fn forward(
    g: &Graph,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    hops: usize,
    heads: usize,
    eps: f64,
) -> Result<(Matrix, Vec<f64>)> {
    let d = dims(g, q, k, v, heads)?;
    let phi_q = q.map(elu_plus_one);
    let phi_k = k.map(elu_plus_one);
    let w = d.state_width();
    let hs = d.head_state();
    let out_w = hops * d.hop_width();
    let mut out = Matrix::zeros(d.n, out_w);
    let mut dens = vec![0.0; d.n * hops * d.heads];

    let mut cur = initial_state(d, &phi_k, v);
    let mut next = vec![0.0; cur.len()];
    for hop in 0..hops {
        g.random_walk_into(&cur, w, &mut next);
        std::mem::swap(&mut cur, &mut next);
        for i in 0..d.n {
            let qrow = phi_q.row(i);
            let srow = &cur[i * w..(i + 1) * w];
            let orow = out.row_mut(i);
            for h in 0..d.heads {
                let qh = &qrow[h * d.dk..(h + 1) * d.dk];
                let st = &srow[h * hs..(h + 1) * hs];
                let z = &st[d.dk * d.dv..];
                let den = qh.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + eps;
                dens[(i * hops + hop) * d.heads + h] = den;
                let o =
                    &mut orow[hop * d.hop_width() + h * d.dv..hop * d.hop_width() + (h + 1) * d.dv];
                for (a, &qa) in qh.iter().enumerate() {
                    let srow_a = &st[a * d.dv..(a + 1) * d.dv];
                    for (ob, &sb) in o.iter_mut().zip(srow_a) {
                        *ob += qa * sb;
                    }
                }
                o.iter_mut().for_each(|x| *x /= den);
            }
        }
    }
    Ok((out, dens))
}

/// Tape node for [`forward`]. Inputs are `[Q, K, V]`.
pub(crate) struct StaHopsOp {
    pub graph: Arc<Graph>,
    pub hops: usize,
    pub heads: usize,
    pub dens: Vec<f64>,
}

impl CustomOp for StaHopsOp {
    fn name(&self) -> &'static str {
        "sta_hops"
    }

    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let d = dims(&self.graph, q, k, v, self.heads).expect("shapes checked in forward");
        let hops = self.hops;
        let w = d.state_width();
        let hs = d.head_state();
        let hw = d.hop_width();
        let phi_q = q.map(elu_plus_one);
        let phi_k = k.map(elu_plus_one);

        // ∂num = G / den, ∂den = −(G·out) / den, per node, hop and head.
        let mut gnum = grad.clone();
        let mut gden = vec![0.0; d.n * hops * d.heads];
        for i in 0..d.n {
            let grow = gnum.row_mut(i);
            let orow = output.row(i);
            for hop in 0..hops {
                for h in 0..d.heads {
                    let idx = (i * hops + hop) * d.heads + h;
                    let den = self.dens[idx];
                    let span = hop * hw + h * d.dv..hop * hw + (h + 1) * d.dv;
                    let dot: f64 = grow[span.clone()]
                        .iter()
                        .zip(&orow[span.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    gden[idx] = -dot / den;
                    grow[span].iter_mut().for_each(|x| *x /= den);
                }
            }
        }

        // Forward sweep: ∂φ(Q) needs the propagated states.
        let mut g_phi_q = Matrix::zeros(d.n, d.heads * d.dk);
        let mut cur = initial_state(d, &phi_k, v);
        let mut next = vec![0.0; cur.len()];
        for hop in 0..hops {
            self.graph.random_walk_into(&cur, w, &mut next);
            std::mem::swap(&mut cur, &mut next);
            for i in 0..d.n {
                let srow = &cur[i * w..(i + 1) * w];
                let gn = gnum.row(i);
                let gq = g_phi_q.row_mut(i);
                for h in 0..d.heads {
                    let st = &srow[h * hs..(h + 1) * hs];
                    let z = &st[d.dk * d.dv..];
                    let gd = gden[(i * hops + hop) * d.heads + h];
                    let gnh = &gn[hop * hw + h * d.dv..hop * hw + (h + 1) * d.dv];
                    for a in 0..d.dk {
                        let sa = &st[a * d.dv..(a + 1) * d.dv];
                        let s: f64 = sa.iter().zip(gnh).map(|(x, y)| x * y).sum();
                        gq[h * d.dk + a] += s + z[a] * gd;
                    }
                }
            }
        }

        // Adjoint sweep: R ← (A·D⁻¹)ᵀ (R + C_hop), hop = K..1, gives ∂state₀.
        let mut r = vec![0.0; d.n * w];
        let mut tmp = vec![0.0; d.n * w];
        for hop in (0..hops).rev() {
            for i in 0..d.n {
                let qrow = phi_q.row(i);
                let gn = gnum.row(i);
                let rrow = &mut r[i * w..(i + 1) * w];
                for h in 0..d.heads {
                    let qh = &qrow[h * d.dk..(h + 1) * d.dk];
                    let gnh = &gn[hop * hw + h * d.dv..hop * hw + (h + 1) * d.dv];
                    let gd = gden[(i * hops + hop) * d.heads + h];
                    let rh = &mut rrow[h * hs..(h + 1) * hs];
                    for (a, &qa) in qh.iter().enumerate() {
                        for (x, &gb) in rh[a * d.dv..(a + 1) * d.dv].iter_mut().zip(gnh) {
                            *x += qa * gb;
                        }
                        rh[d.dk * d.dv + a] += qa * gd;
                    }
                }
            }
            self.graph.random_walk_transpose_into(&r, w, &mut tmp);
            std::mem::swap(&mut r, &mut tmp);
        }

        let mut g_phi_k = Matrix::zeros(d.n, d.heads * d.dk);
        let mut gv = Matrix::zeros(d.n, d.heads * d.dv);
        for i in 0..d.n {
            let rrow = &r[i * w..(i + 1) * w];
            let krow = phi_k.row(i);
            let vrow = v.row(i);
            let gk = g_phi_k.row_mut(i);
            for h in 0..d.heads {
                let rh = &rrow[h * hs..(h + 1) * hs];
                let vh = &vrow[h * d.dv..(h + 1) * d.dv];
                for a in 0..d.dk {
                    let ra = &rh[a * d.dv..(a + 1) * d.dv];
                    gk[h * d.dk + a] =
                        ra.iter().zip(vh).map(|(x, y)| x * y).sum::<f64>() + rh[d.dk * d.dv + a];
                }
            }
            let gvrow = gv.row_mut(i);
            for h in 0..d.heads {
                let rh = &rrow[h * hs..(h + 1) * hs];
                let kh = &krow[h * d.dk..(h + 1) * d.dk];
                let gvh = &mut gvrow[h * d.dv..(h + 1) * d.dv];
                for (a, &ka) in kh.iter().enumerate() {
                    for (o, &x) in gvh.iter_mut().zip(&rh[a * d.dv..(a + 1) * d.dv]) {
                        *o += ka * x;
                    }
                }
            }
        }

        let gq = g_phi_q.zip_map(q, |gv, x| gv * elu_plus_one_grad(x));
        let gk = g_phi_k.zip_map(k, |gv, x| gv * elu_plus_one_grad(x));
        vec![Some(gq), Some(gk), Some(gv)]
    }
}
