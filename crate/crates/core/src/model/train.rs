//! Full-batch training with early stopping, splits and a logistic baseline.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{evaluate, masked_nll, Metric};
use super::{ga_sta_forward, stagnn_forward, Dropout, StagnnParams};
use crate::attention::{Aggregation, GateMode, StaConfig, DEFAULT_EPS};
use crate::data::{hex, Dataset};
use crate::diff::{checkpoint, AdamConfig, AdamState, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub hops: usize,
    pub heads: usize,
    pub hidden: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub metric: Metric,
    pub pe_dims: usize,
    pub gate_mode: GateMode,
    pub aggregation: Aggregation,
    /// `Some(h)` trains the global-attention hybrid using `h ≤ hops` hops.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hybrid_hops: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            dropout: 0.0,
            weight_decay: 0.0,
            hops: 5,
            heads: 4,
            hidden: 64,
            max_epochs: 3000,
            patience: 200,
            seed: 0,
            split: [0.5, 0.25, 0.25],
            metric: Metric::Accuracy,
            pe_dims: 3,
            gate_mode: GateMode::SoftmaxGate,
            aggregation: Aggregation::Gpr,
            hybrid_hops: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::invalid(format!(
                "split ratios {:?} must be in [0,1] and sum to 1",
                self.split
            )));
        }
        if self.patience > self.max_epochs {
            return Err(Error::invalid(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite())
            || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite())
        {
            return Err(Error::invalid(
                "lr and weight_decay must be finite and non-negative",
            ));
        }
        if let Some(h) = self.hybrid_hops {
            if h > self.hops {
                return Err(Error::invalid(format!(
                    "hybrid_hops {h} exceeds hops {}",
                    self.hops
                )));
            }
        }
        Ok(())
    }

    pub fn sta_config(&self) -> StaConfig {
        StaConfig {
            hops: self.hops,
            heads: self.heads,
            head_dim: self.hidden / self.heads.max(1),
            gate_mode: self.gate_mode,
            aggregation: self.aggregation,
            eps: DEFAULT_EPS,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex(&Sha256::digest(json))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded uniform shuffle cut at `round(N·r₀)` and `round(N·(r₀+r₁))`.
pub fn make_splits(n: usize, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::invalid(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let a = ((n as f64) * ratios[0]).round() as usize;
    let b = (((n as f64) * (ratios[0] + ratios[1])).round() as usize).clamp(a, n);
    let splits = Splits {
        train: idx[..a.min(n)].to_vec(),
        val: idx[a.min(n)..b].to_vec(),
        test: idx[b..].to_vec(),
    };
    if splits.train.is_empty() || splits.val.is_empty() || splits.test.is_empty() {
        return Err(Error::invalid(format!(
            "split of {n} nodes by {ratios:?} leaves a part empty ({}/{}/{})",
            splits.train.len(),
            splits.val.len(),
            splits.test.len()
        )));
    }
    Ok(splits)
}

fn check_splits(splits: &Splits, n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for part in [&splits.train, &splits.val, &splits.test] {
        if part.is_empty() {
            return Err(Error::invalid("empty split"));
        }
        for &i in part {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!(
                    "split index {i} out of range or repeated"
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub seed: u64,
    pub config_hash: String,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub train_metric: Vec<f64>,
    pub val_metric: Vec<f64>,
    pub test_metric: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub test_at_best: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// α₀..α_K at the best epoch.
    pub gpr_weights: Vec<f64>,
    /// Gate values as applied (`K × H` rows), at the best epoch.
    pub gates: Vec<Vec<f64>>,
    pub raw_gates: Vec<Vec<f64>>,
    pub num_params: usize,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// The report without wall time, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }
}

/// Stored as the free-form metadata string of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub in_dim: usize,
    pub num_classes: usize,
    pub best_epoch: usize,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub params: StagnnParams,
}

impl TrainOutcome {
    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config: self.report.config.clone(),
            in_dim: self.params.in_dim,
            num_classes: self.params.num_classes,
            best_epoch: self.report.best_epoch,
            config_hash: self.report.config_hash.clone(),
        }
    }
}

/// Writes the best parameters with [`CheckpointMeta`] as JSON metadata.
pub fn save_checkpoint(path: &std::path::Path, outcome: &TrainOutcome) -> Result<()> {
    let meta = serde_json::to_string(&outcome.checkpoint_meta()).expect("meta serialises");
    checkpoint::save(path, &outcome.params.store, &meta)
}

/// Reads a checkpoint written by [`save_checkpoint`] and checks every tensor
/// against the stored configuration.
pub fn load_checkpoint(path: &std::path::Path) -> Result<(StagnnParams, CheckpointMeta)> {
    let (store, meta) = checkpoint::load(path)?;
    let meta: CheckpointMeta =
        serde_json::from_str(&meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    meta.config.validate()?;
    let params = StagnnParams {
        store,
        in_dim: meta.in_dim,
        num_classes: meta.num_classes,
    };
    params.validate(&meta.config.sta_config())?;
    Ok((params, meta))
}

fn rows(m: Option<Matrix>) -> Vec<Vec<f64>> {
    m.map(|m| (0..m.rows()).map(|r| m.row(r).to_vec()).collect())
        .unwrap_or_default()
}

/// Forward pass in evaluation mode.
pub fn predict(
    data_x: &Matrix,
    graph: &std::sync::Arc<crate::graph::Graph>,
    tc: &TrainConfig,
    params: &StagnnParams,
) -> Result<Matrix> {
    let sta = tc.sta_config();
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape)?;
    let x = tape.constant(data_x.clone());
    let mut r = rng::seeded(0);
    let mut drop = Dropout {
        rate: 0.0,
        training: false,
        rng: &mut r,
    };
    let logits = match tc.hybrid_hops {
        Some(h) => ga_sta_forward(&mut tape, graph, &sta, &vars, x, h, &mut drop)?,
        None => stagnn_forward(&mut tape, graph, &sta, &vars, x, &mut drop)?,
    };
    Ok(tape.value(logits).clone())
}

/// Trains STAGNN on `data` (positional encodings are computed here) and
/// returns the report plus the parameters of the best validation epoch.
///
/// Each epoch evaluates the parameters it starts from, then takes one Adam
/// step. An epoch improves on the best so far when its validation metric is
/// higher, or equal with a lower validation loss.
pub fn train(data: &Dataset, splits: &Splits, tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    let n = data.num_nodes();
    check_splits(splits, n)?;
    let started = Instant::now();
    let mut data = data.clone();
    data.ensure_pe(tc.pe_dims)?;
    let x_in = data.input_features();
    let sta = tc.sta_config();
    let mut r = rng::seeded(tc.seed);
    let mut params = StagnnParams::init(
        x_in.cols(),
        data.num_classes,
        &sta,
        tc.hybrid_hops.is_some(),
        &mut r,
    )?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: tc.lr,
            weight_decay: tc.weight_decay,
            ..AdamConfig::default()
        },
        params.store.values(),
    );

    let mut report = TrainReport {
        config: tc.clone(),
        seed: tc.seed,
        config_hash: tc.hash(),
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        train_metric: Vec::new(),
        val_metric: Vec::new(),
        test_metric: Vec::new(),
        best_epoch: 0,
        best_val_metric: f64::NEG_INFINITY,
        test_at_best: 0.0,
        epochs_run: 0,
        stopped_early: false,
        gpr_weights: Vec::new(),
        gates: Vec::new(),
        raw_gates: Vec::new(),
        num_params: params.store.num_scalars(),
        wall_time_secs: 0.0,
    };
    let mut best_store: ParamStore = params.store.clone();
    let mut best_val_loss = f64::INFINITY;

    for epoch in 0..tc.max_epochs {
        let diverged = |loss: f64| Error::Diverged { epoch, loss };
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape)?;
        let x = tape.constant(x_in.clone());
        let mut drop = Dropout {
            rate: tc.dropout,
            training: true,
            rng: &mut r,
        };
        let forward = match tc.hybrid_hops {
            Some(h) => ga_sta_forward(&mut tape, &data.graph, &sta, &vars, x, h, &mut drop),
            None => stagnn_forward(&mut tape, &data.graph, &sta, &vars, x, &mut drop),
        };
        let logits = match forward {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e),
        };
        let loss = match tape.cross_entropy(logits, &data.labels, &splits.train) {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e),
        };
        let loss_value = tape.value(loss)[(0, 0)];
        if !loss_value.is_finite() {
            return Err(diverged(loss_value));
        }
        // Without dropout the training pass already is the evaluation pass.
        let eval_logits = if tc.dropout == 0.0 {
            tape.value(logits).clone()
        } else {
            predict(&x_in, &data.graph, tc, &params)?
        };
        tape.backward(loss).map_err(|e| match e {
            Error::NonFinite { .. } => diverged(loss_value),
            other => other,
        })?;
        let grads = params.store.grads(&tape, &vars.all);

        let val_loss = masked_nll(&eval_logits, &data.labels, &splits.val);
        let train_metric = evaluate(&eval_logits, &data.labels, &splits.train, tc.metric)?;
        let val_metric = evaluate(&eval_logits, &data.labels, &splits.val, tc.metric)?;
        let test_metric = evaluate(&eval_logits, &data.labels, &splits.test, tc.metric)?;
        report.train_loss.push(loss_value);
        report.val_loss.push(val_loss);
        report.train_metric.push(train_metric);
        report.val_metric.push(val_metric);
        report.test_metric.push(test_metric);
        report.epochs_run = epoch + 1;

        let improved = val_metric > report.best_val_metric
            || (val_metric == report.best_val_metric && val_loss < best_val_loss);
        if improved {
            report.best_epoch = epoch;
            report.best_val_metric = val_metric;
            report.test_at_best = test_metric;
            best_val_loss = val_loss;
            best_store = params.store.clone();
        } else if epoch - report.best_epoch >= tc.patience {
            report.stopped_early = true;
            break;
        }
        adam.step(params.store.values_mut(), &grads)?;
    }

    params.store = best_store;
    report.gpr_weights = params.gpr_weights();
    report.gates = rows(params.effective_gates(&sta));
    report.raw_gates = rows(params.raw_gates().cloned());
    report.wall_time_secs = started.elapsed().as_secs_f64();
    log::info!(
        "trained {} epochs, best epoch {} (val {:.4}, test {:.4})",
        report.epochs_run,
        report.best_epoch,
        report.best_val_metric,
        report.test_at_best
    );
    Ok(TrainOutcome { report, params })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub best_epoch: usize,
    pub val_metric: f64,
    pub test_metric: f64,
}

/// Multinomial logistic regression on the raw features, trained with the
/// same tape, optimiser and early-stopping rule as [`train`].
pub fn logistic_baseline(
    data: &Dataset,
    splits: &Splits,
    lr: f64,
    max_epochs: usize,
    metric: Metric,
    seed: u64,
) -> Result<BaselineReport> {
    check_splits(splits, data.num_nodes())?;
    let mut r = rng::seeded(seed);
    let mut params = vec![
        Matrix::glorot(data.features.cols(), data.num_classes, &mut r),
        Matrix::zeros(1, data.num_classes),
    ];
    let mut adam = AdamState::new(
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        &params,
    );
    let mut best = BaselineReport {
        best_epoch: 0,
        val_metric: f64::NEG_INFINITY,
        test_metric: 0.0,
    };
    let mut best_loss = f64::INFINITY;
    for epoch in 0..max_epochs {
        let mut tape = Tape::new();
        let w = tape.param(params[0].clone());
        let b = tape.param(params[1].clone());
        let x = tape.constant(data.features.clone());
        let z = tape.matmul(x, w)?;
        let logits = tape.add_row(z, b)?;
        let loss = tape.cross_entropy(logits, &data.labels, &splits.train)?;
        let lv = tape.value(logits).clone();
        tape.backward(loss)?;
        let val = evaluate(&lv, &data.labels, &splits.val, metric)?;
        let val_loss = masked_nll(&lv, &data.labels, &splits.val);
        if val > best.val_metric || (val == best.val_metric && val_loss < best_loss) {
            best = BaselineReport {
                best_epoch: epoch,
                val_metric: val,
                test_metric: evaluate(&lv, &data.labels, &splits.test, metric)?,
            };
            best_loss = val_loss;
        }
        let grads = vec![tape.grad_or_zeros(w), tape.grad_or_zeros(b)];
        adam.step(&mut params, &grads)?;
    }
    Ok(best)
}
