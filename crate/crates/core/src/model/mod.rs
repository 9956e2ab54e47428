//! STAGNN: `H = MLP(X')`, `Q, K, V = H·W_{Q,K,V}`, hop outputs from gated
//! multi-head STA, a hop aggregator, then a linear classifier. Also the
//! variant that adds kernelized global attention with a teleport weight.

mod metrics;
mod train;

use std::sync::Arc;

use rand::Rng;

pub use metrics::{argmax, evaluate, masked_nll, roc_auc, Metric};
pub use train::{
    load_checkpoint, logistic_baseline, make_splits, predict, save_checkpoint, train,
    BaselineReport, CheckpointMeta, Splits, TrainConfig, TrainOutcome, TrainReport,
};

use crate::attention::{self, Aggregation, StaConfig, StaParams, StaVars};
use crate::diff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::Matrix;

pub const MLP_W1: &str = "mlp.w1";
pub const MLP_B1: &str = "mlp.b1";
pub const MLP_W2: &str = "mlp.w2";
pub const MLP_B2: &str = "mlp.b2";
pub const W_Q: &str = "w_q";
pub const W_K: &str = "w_k";
pub const W_V: &str = "w_v";
pub const CLS_W: &str = "cls.w";
pub const CLS_B: &str = "cls.b";

/// All STAGNN tensors in a [`ParamStore`], addressed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct StagnnParams {
    pub store: ParamStore,
    pub in_dim: usize,
    pub num_classes: usize,
}

impl StagnnParams {
    pub fn init<R: Rng + ?Sized>(
        in_dim: usize,
        num_classes: usize,
        sta: &StaConfig,
        with_teleport: bool,
        rng: &mut R,
    ) -> Result<Self> {
        sta.validate()?;
        if in_dim == 0 || num_classes == 0 {
            return Err(Error::invalid(format!(
                "input width {in_dim} and class count {num_classes} must be positive"
            )));
        }
        let h = sta.hidden();
        let mut store = ParamStore::new();
        store.insert(MLP_W1, Matrix::glorot(in_dim, h, rng));
        store.insert(MLP_B1, Matrix::zeros(1, h));
        store.insert(MLP_W2, Matrix::glorot(h, h, rng));
        store.insert(MLP_B2, Matrix::zeros(1, h));
        store.insert(W_Q, Matrix::glorot(h, h, rng));
        store.insert(W_K, Matrix::glorot(h, h, rng));
        store.insert(W_V, Matrix::glorot(h, h, rng));
        for (name, m) in StaParams::init(sta, with_teleport, rng).named() {
            store.insert(name, m);
        }
        store.insert(CLS_W, Matrix::glorot(h, num_classes, rng));
        store.insert(CLS_B, Matrix::zeros(1, num_classes));
        Ok(Self {
            store,
            in_dim,
            num_classes,
        })
    }

    /// Checks that a (possibly loaded) store has every tensor in the shape the
    /// configuration implies.
    pub fn validate(&self, sta: &StaConfig) -> Result<()> {
        let h = sta.hidden();
        let (k, heads, c) = (sta.hops, sta.heads, self.num_classes);
        let mut want: Vec<(&str, (usize, usize))> = vec![
            (MLP_W1, (self.in_dim, h)),
            (MLP_B1, (1, h)),
            (MLP_W2, (h, h)),
            (MLP_B2, (1, h)),
            (W_Q, (h, h)),
            (W_K, (h, h)),
            (W_V, (h, h)),
            (attention::GPR_WEIGHTS, (1, k + 1)),
            (attention::OUTPUT_PROJECTION, (h, h)),
            (CLS_W, (h, c)),
            (CLS_B, (1, c)),
        ];
        if sta.gate_mode != attention::GateMode::NoGate {
            want.push((attention::GATES, (k, heads)));
        }
        match sta.aggregation {
            Aggregation::AttnReadout => want.push((attention::READOUT_PROJECTION, (1, 2 * h))),
            Aggregation::Concat => want.push((attention::CONCAT_PROJECTION, ((k + 1) * h, h))),
            _ => {}
        }
        for (name, shape) in want {
            let m = self
                .store
                .by_name(name)
                .ok_or_else(|| Error::invalid(format!("parameter {name} missing")))?;
            if m.shape() != shape {
                return Err(Error::shape(
                    "StagnnParams",
                    format!("{name} {}x{}", shape.0, shape.1),
                    m.shape_str(),
                ));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.store.by_name(name)
    }

    /// Learned α, α₀ first.
    pub fn gpr_weights(&self) -> Vec<f64> {
        self.get(attention::GPR_WEIGHTS)
            .map(|m| m.as_slice().to_vec())
            .unwrap_or_default()
    }

    /// Raw gate parameters `K × H`, if the model is gated.
    pub fn raw_gates(&self) -> Option<&Matrix> {
        self.get(attention::GATES)
    }

    /// Gate values as applied to the heads: the row softmax for
    /// [`attention::GateMode::SoftmaxGate`], the raw values otherwise.
    pub fn effective_gates(&self, sta: &StaConfig) -> Option<Matrix> {
        let g = self.raw_gates()?;
        Some(match sta.gate_mode {
            attention::GateMode::SoftmaxGate => crate::diff::row_softmax(g),
            _ => g.clone(),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<ModelVars> {
        let vars = self.store.bind(tape);
        ModelVars::new(self.store.names(), &vars)
    }
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub all: Vec<Var>,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub sta: StaVars,
    pub cls_w: Var,
    pub cls_b: Var,
}

impl ModelVars {
    pub fn new(names: &[String], vars: &[Var]) -> Result<Self> {
        let find = |n: &str| {
            names
                .iter()
                .position(|x| x == n)
                .map(|i| vars[i])
                .ok_or_else(|| Error::invalid(format!("parameter {n} missing")))
        };
        Ok(Self {
            all: vars.to_vec(),
            w1: find(MLP_W1)?,
            b1: find(MLP_B1)?,
            w2: find(MLP_W2)?,
            b2: find(MLP_B2)?,
            wq: find(W_Q)?,
            wk: find(W_K)?,
            wv: find(W_V)?,
            sta: StaVars::from_named(names, vars)?,
            cls_w: find(CLS_W)?,
            cls_b: find(CLS_B)?,
        })
    }
}

/// Dropout settings for one pass. `rate` applies after the MLP's hidden
/// activation and to `H` before the Q/K/V projections.
pub struct Dropout<'a, R: Rng + ?Sized> {
    pub rate: f64,
    pub training: bool,
    pub rng: &'a mut R,
}

fn encode<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &ModelVars,
    x: Var,
    drop: &mut Dropout<'_, R>,
) -> Result<(Var, Var, Var)> {
    let h = tape.matmul(x, vars.w1)?;
    let h = tape.add_row(h, vars.b1)?;
    let h = tape.relu(h)?;
    let h = tape.dropout(h, drop.rate, drop.training, drop.rng)?;
    let h = tape.matmul(h, vars.w2)?;
    let h = tape.add_row(h, vars.b2)?;
    let h = tape.dropout(h, drop.rate, drop.training, drop.rng)?;
    Ok((
        tape.matmul(h, vars.wq)?,
        tape.matmul(h, vars.wk)?,
        tape.matmul(h, vars.wv)?,
    ))
}

fn classify(tape: &mut Tape, vars: &ModelVars, o: Var) -> Result<Var> {
    let logits = tape.matmul(o, vars.cls_w)?;
    tape.add_row(logits, vars.cls_b)
}

/// Logits `N × C`. `x` is the input with positional-encoding columns
/// already appended.
pub fn stagnn_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    g: &Arc<Graph>,
    sta: &StaConfig,
    vars: &ModelVars,
    x: Var,
    drop: &mut Dropout<'_, R>,
) -> Result<Var> {
    let (q, k, v) = encode(tape, vars, x, drop)?;
    let o = if sta.aggregation == Aggregation::Gpr {
        attention::msta_gpr(tape, g, sta, &vars.sta, q, k, v)?
    } else {
        let outs = attention::msta(tape, g, sta, &vars.sta, q, k, v)?;
        attention::aggregate_hops(tape, &outs, sta, &vars.sta)?
    };
    classify(tape, vars, o)
}

/// `O = α_T·SA(Q, K, V) + Σ_{k ≤ h} α_k·MSTA_k`, using the first `h` hops of a
/// model built with capacity `sta.hops`.
pub fn ga_sta_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    g: &Arc<Graph>,
    sta: &StaConfig,
    vars: &ModelVars,
    x: Var,
    h: usize,
    drop: &mut Dropout<'_, R>,
) -> Result<Var> {
    let o = ga_sta_output(tape, g, sta, vars, x, h, drop)?;
    classify(tape, vars, o)
}

fn ga_sta_output<R: Rng + ?Sized>(
    tape: &mut Tape,
    g: &Arc<Graph>,
    sta: &StaConfig,
    vars: &ModelVars,
    x: Var,
    h: usize,
    drop: &mut Dropout<'_, R>,
) -> Result<Var> {
    if h > sta.hops {
        return Err(Error::invalid(format!(
            "hybrid hop count {h} exceeds model capacity {}",
            sta.hops
        )));
    }
    let teleport = vars
        .sta
        .teleport
        .ok_or_else(|| Error::invalid("hybrid model needs a teleport parameter"))?;
    let (q, k, v) = encode(tape, vars, x, drop)?;
    let sub_cfg = StaConfig { hops: h, ..*sta };
    let mut sub = vars.sta;
    sub.gpr_weights = tape.slice_cols(vars.sta.gpr_weights, 0, h + 1)?;
    if let Some(gates) = vars.sta.gates {
        // First h rows of the K × H gate matrix.
        let t = tape.transpose(gates)?;
        let t = tape.slice_cols(t, 0, h)?;
        sub.gates = Some(tape.transpose(t)?);
    }
    let local = attention::msta_gpr(tape, g, &sub_cfg, &sub, q, k, v)?;
    let sa = attention::global_sa(tape, q, k, v, sta.heads, sta.eps)?;
    let sa = tape.block_weighted_sum(sa, teleport, 0, sta.hidden())?;
    tape.add(sa, local)
}

#[cfg(test)]
mod tests;
