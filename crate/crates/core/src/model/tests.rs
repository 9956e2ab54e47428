use std::sync::Arc;

use super::*;
use crate::attention::{global_sa_matrix, sta_all_hops, GateMode};
use crate::data::{random_ergodic_graph, synth_sbm, Dataset, DatasetMeta, SbmSpec};
use crate::diff::{gradient_check, row_softmax};
use crate::rng;

fn sta(hops: usize, heads: usize, dim: usize) -> StaConfig {
    StaConfig::new(hops, heads, dim)
}

fn no_drop(r: &mut rng::StaRng) -> Dropout<'_, rng::StaRng> {
    Dropout {
        rate: 0.0,
        training: false,
        rng: r,
    }
}

struct Inst {
    g: Arc<Graph>,
    x: Matrix,
    cfg: StaConfig,
    params: StagnnParams,
}

fn instance(n: usize, f: usize, c: usize, cfg: StaConfig, teleport: bool, seed: u64) -> Inst {
    let mut r = rng::seeded(seed);
    let g = Arc::new(random_ergodic_graph(n, 0.3, &mut r).unwrap());
    let x = Matrix::random_uniform(n, f, -1.0, 1.0, &mut r);
    let params = StagnnParams::init(f, c, &cfg, teleport, &mut r).unwrap();
    Inst { g, x, cfg, params }
}

fn logits(inst: &Inst) -> Matrix {
    let mut tape = Tape::new();
    let vars = inst.params.bind(&mut tape).unwrap();
    let x = tape.constant(inst.x.clone());
    let mut r = rng::seeded(0);
    let out = stagnn_forward(
        &mut tape,
        &inst.g,
        &inst.cfg,
        &vars,
        x,
        &mut no_drop(&mut r),
    )
    .unwrap();
    tape.value(out).clone()
}

fn set(inst: &mut Inst, name: &str, value: Matrix) {
    let idx = inst
        .params
        .store
        .names()
        .iter()
        .position(|n| n == name)
        .unwrap();
    inst.params.store.values_mut()[idx] = value;
}

#[test]
fn init_shapes_validate() {
    let inst = instance(6, 3, 2, sta(2, 2, 4), false, 1);
    inst.params.validate(&inst.cfg).unwrap();
    assert_eq!(inst.params.gpr_weights(), vec![1.0; 3]);
    assert_eq!(inst.params.raw_gates().unwrap(), &Matrix::zeros(2, 2));
    let other = sta(3, 2, 4);
    assert!(inst.params.validate(&other).is_err());
}

#[test]
fn alpha_zero_only_path_ignores_neighbours() {
    let mut inst = instance(9, 3, 2, sta(3, 2, 2), false, 2);
    set(
        &mut inst,
        attention::GPR_WEIGHTS,
        Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0]]),
    );
    let base = logits(&inst);
    // Changing every other node's features leaves node 0's logits alone.
    for i in 1..9 {
        inst.x.row_mut(i).iter_mut().for_each(|v| *v = -*v + 0.3);
    }
    let moved = logits(&inst);
    assert_eq!(base.row(0), moved.row(0));
    assert_ne!(base.row(1), moved.row(1));
}

#[test]
fn forward_is_permutation_equivariant() {
    let inst = instance(10, 3, 3, sta(3, 2, 2), false, 3);
    let base = logits(&inst);
    let perm = vec![3, 7, 0, 9, 1, 5, 2, 8, 6, 4];
    let moved = Inst {
        g: Arc::new(inst.g.permuted(&perm).unwrap()),
        x: inst.x.permute_rows(&perm),
        cfg: inst.cfg,
        params: inst.params.clone(),
    };
    assert!(base.permute_rows(&perm).max_abs_diff(&logits(&moved)) < 1e-12);
}

#[test]
fn fast_path_equals_generic_aggregation() {
    for gate in [GateMode::SoftmaxGate, GateMode::RawGate, GateMode::NoGate] {
        let cfg = StaConfig {
            gate_mode: gate,
            ..sta(4, 2, 3)
        };
        let mut inst = instance(12, 4, 3, cfg, false, 4);
        set(
            &mut inst,
            attention::GPR_WEIGHTS,
            Matrix::from_rows(&[[0.3, -0.7, 1.2, 0.1, 0.9]]),
        );
        let fast = logits(&inst);
        let mut tape = Tape::new();
        let vars = inst.params.bind(&mut tape).unwrap();
        let x = tape.constant(inst.x.clone());
        let mut r = rng::seeded(0);
        let (q, k, v) = encode(&mut tape, &vars, x, &mut no_drop(&mut r)).unwrap();
        let outs = attention::msta(&mut tape, &inst.g, &cfg, &vars.sta, q, k, v).unwrap();
        let o = attention::aggregate_hops(&mut tape, &outs, &cfg, &vars.sta).unwrap();
        let generic = classify(&mut tape, &vars, o).unwrap();
        assert!(tape.value(generic).max_abs_diff(&fast) < 1e-12, "{gate:?}");
    }
}

fn check_model_gradient(inst: &Inst, hybrid: Option<usize>) -> crate::diff::GradCheckReport {
    let labels: Vec<usize> = (0..inst.x.rows())
        .map(|i| i % inst.params.num_classes)
        .collect();
    let mask: Vec<usize> = (0..inst.x.rows()).collect();
    let names = inst.params.store.names().to_vec();
    gradient_check(inst.params.store.values(), 1e-5, |t, p| {
        let vars = ModelVars::new(&names, p)?;
        let x = t.constant(inst.x.clone());
        let mut r = rng::seeded(0);
        let out = match hybrid {
            Some(h) => ga_sta_forward(t, &inst.g, &inst.cfg, &vars, x, h, &mut no_drop(&mut r))?,
            None => stagnn_forward(t, &inst.g, &inst.cfg, &vars, x, &mut no_drop(&mut r))?,
        };
        t.cross_entropy(out, &labels, &mask)
    })
    .unwrap()
}

#[test]
fn end_to_end_gradient_check() {
    // N = 10, C = 3, K = 3, H = 2, hidden = 8.
    let mut inst = instance(10, 4, 3, sta(3, 2, 4), false, 5);
    set(
        &mut inst,
        attention::GATES,
        Matrix::random_uniform(3, 2, -1.0, 1.0, &mut rng::seeded(6)),
    );
    let report = check_model_gradient(&inst, None);
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn hybrid_gradient_check() {
    let inst = instance(10, 4, 3, sta(3, 2, 4), true, 7);
    let report = check_model_gradient(&inst, Some(2));
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

fn hybrid_output(inst: &Inst, h: usize) -> Result<Matrix> {
    let mut tape = Tape::new();
    let vars = inst.params.bind(&mut tape)?;
    let x = tape.constant(inst.x.clone());
    let mut r = rng::seeded(0);
    let o = ga_sta_output(
        &mut tape,
        &inst.g,
        &inst.cfg,
        &vars,
        x,
        h,
        &mut no_drop(&mut r),
    )?;
    Ok(tape.value(o).clone())
}

/// Q, K, V recomputed off-tape with plain matrix algebra.
fn qkv(inst: &Inst) -> (Matrix, Matrix, Matrix) {
    let p = |n: &str| inst.params.get(n).unwrap().clone();
    let add_row = |m: Matrix, b: &Matrix| {
        let mut m = m;
        for r in 0..m.rows() {
            m.row_mut(r)
                .iter_mut()
                .zip(b.as_slice())
                .for_each(|(x, y)| *x += y);
        }
        m
    };
    let h1 = add_row(inst.x.matmul(&p(MLP_W1)).unwrap(), &p(MLP_B1)).map(|v| v.max(0.0));
    let h = add_row(h1.matmul(&p(MLP_W2)).unwrap(), &p(MLP_B2));
    (
        h.matmul(&p(W_Q)).unwrap(),
        h.matmul(&p(W_K)).unwrap(),
        h.matmul(&p(W_V)).unwrap(),
    )
}

fn heads_sa(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Matrix {
    let d = q.cols() / heads;
    let parts: Vec<Matrix> = (0..heads)
        .map(|h| {
            global_sa_matrix(
                &q.slice_cols(h * d, d),
                &k.slice_cols(h * d, d),
                &v.slice_cols(h * d, d),
            )
            .unwrap()
        })
        .collect();
    Matrix::concat_cols(&parts.iter().collect::<Vec<_>>()).unwrap()
}

#[test]
fn hybrid_pure_global_path() {
    let mut inst = instance(8, 3, 2, sta(3, 2, 2), true, 8);
    set(&mut inst, attention::GPR_WEIGHTS, Matrix::zeros(1, 4));
    let (q, k, v) = qkv(&inst);
    let want = heads_sa(&q, &k, &v, 2);
    assert!(hybrid_output(&inst, 3).unwrap().max_abs_diff(&want) < 1e-12);
}

#[test]
fn hybrid_without_teleport_is_stagnn() {
    let mut inst = instance(8, 3, 2, sta(3, 2, 2), true, 9);
    set(&mut inst, attention::TELEPORT, Matrix::zeros(1, 1));
    let mut tape = Tape::new();
    let vars = inst.params.bind(&mut tape).unwrap();
    let x = tape.constant(inst.x.clone());
    let mut r = rng::seeded(0);
    let hybrid = ga_sta_forward(
        &mut tape,
        &inst.g,
        &inst.cfg,
        &vars,
        x,
        3,
        &mut no_drop(&mut r),
    )
    .unwrap();
    assert!(tape.value(hybrid).max_abs_diff(&logits(&inst)) < 1e-12);
}

#[test]
fn hybrid_two_hops_by_hand() {
    let mut inst = instance(9, 3, 2, sta(3, 2, 2), true, 10);
    set(
        &mut inst,
        attention::GPR_WEIGHTS,
        Matrix::from_rows(&[[0.4, -0.6, 1.1, 5.0]]),
    );
    set(&mut inst, attention::TELEPORT, Matrix::filled(1, 1, 0.7));
    set(
        &mut inst,
        attention::GATES,
        Matrix::from_rows(&[[0.2, -0.3], [1.0, 0.5], [9.0, -9.0]]),
    );
    let (q, k, v) = qkv(&inst);
    let sta_hops = sta_all_hops(&inst.g, 2, 2, &q, &k, &v).unwrap();
    let gates = row_softmax(inst.params.raw_gates().unwrap());
    let w_o = inst.params.get(attention::OUTPUT_PROJECTION).unwrap();
    let alpha = [0.4, -0.6, 1.1];
    let mut want = heads_sa(&q, &k, &v, 2).scale(0.7);
    want.axpy(alpha[0], &v);
    for hop in 1..=2 {
        let mut gated = sta_hops[hop].clone();
        for r in 0..gated.rows() {
            for (c, x) in gated.row_mut(r).iter_mut().enumerate() {
                *x *= gates[(hop - 1, c / 2)];
            }
        }
        want.axpy(alpha[hop], &gated.matmul(w_o).unwrap());
    }
    assert!(hybrid_output(&inst, 2).unwrap().max_abs_diff(&want) < 1e-12);
}

#[test]
fn hybrid_rejects_too_many_hops() {
    let inst = instance(6, 2, 2, sta(2, 1, 2), true, 11);
    assert!(hybrid_output(&inst, 3).is_err());
    let plain = instance(6, 2, 2, sta(2, 1, 2), false, 11);
    assert!(hybrid_output(&plain, 1).is_err());
}

#[test]
fn splits_sizes_and_determinism() {
    let s = make_splits(100, [0.5, 0.25, 0.25], 3).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (50, 25, 25));
    assert_eq!(s, make_splits(100, [0.5, 0.25, 0.25], 3).unwrap());
    assert_ne!(s, make_splits(100, [0.5, 0.25, 0.25], 4).unwrap());
    let s = make_splits(10, [0.6, 0.2, 0.2], 0).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
    let mut all: Vec<usize> = s
        .train
        .iter()
        .chain(&s.val)
        .chain(&s.test)
        .copied()
        .collect();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
}

#[test]
fn splits_errors() {
    assert!(make_splits(3, [0.9, 0.05, 0.05], 0).is_err());
    assert!(make_splits(10, [0.5, 0.5, 0.5], 0).is_err());
}

fn small_sbm(seed: u64) -> Dataset {
    synth_sbm(
        SbmSpec {
            blocks: 2,
            per_block: 30,
            p_in: 0.2,
            p_out: 0.02,
            signal: 2.0,
        },
        seed,
    )
    .unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        hops: 2,
        heads: 2,
        hidden: 8,
        max_epochs: 25,
        patience: 10,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn config_validation() {
    let ok = small_config();
    ok.validate().unwrap();
    for bad in [
        TrainConfig {
            split: [0.5, 0.5, 0.5],
            ..ok.clone()
        },
        TrainConfig {
            patience: 30,
            ..ok.clone()
        },
        TrainConfig {
            hidden: 7,
            ..ok.clone()
        },
        TrainConfig {
            dropout: 1.0,
            ..ok.clone()
        },
        TrainConfig {
            lr: -1.0,
            ..ok.clone()
        },
        TrainConfig {
            hybrid_hops: Some(3),
            ..ok.clone()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn zero_lr_keeps_parameters() {
    let data = small_sbm(1);
    let splits = make_splits(60, [0.5, 0.25, 0.25], 1).unwrap();
    let tc = TrainConfig {
        lr: 0.0,
        ..small_config()
    };
    let out = train(&data, &splits, &tc).unwrap();
    let mut d = data.clone();
    d.ensure_pe(tc.pe_dims).unwrap();
    let init = StagnnParams::init(
        d.input_features().cols(),
        2,
        &tc.sta_config(),
        false,
        &mut rng::seeded(tc.seed),
    )
    .unwrap();
    assert_eq!(out.params.store, init.store);
    let r = &out.report;
    assert!(r.val_metric.iter().all(|&m| m == r.val_metric[0]));
    assert!(r.train_loss.iter().all(|&m| m == r.train_loss[0]));
}

#[test]
fn training_is_deterministic() {
    let data = small_sbm(2);
    let splits = make_splits(60, [0.5, 0.25, 0.25], 2).unwrap();
    let tc = TrainConfig {
        dropout: 0.3,
        ..small_config()
    };
    let a = train(&data, &splits, &tc).unwrap();
    let b = train(&data, &splits, &tc).unwrap();
    assert_eq!(a.report.without_timing(), b.report.without_timing());
    assert_eq!(a.params.store, b.params.store);
}

#[test]
fn best_epoch_has_max_validation_metric() {
    let data = small_sbm(3);
    let splits = make_splits(60, [0.5, 0.25, 0.25], 3).unwrap();
    let tc = TrainConfig {
        lr: 0.05,
        max_epochs: 40,
        patience: 5,
        ..small_config()
    };
    let out = train(&data, &splits, &tc).unwrap();
    let r = &out.report;
    let max = r
        .val_metric
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.val_metric[r.best_epoch], max);
    assert_eq!(r.test_metric[r.best_epoch], r.test_at_best);
    assert_eq!(r.epochs_run, r.val_metric.len());
    if r.stopped_early {
        assert_eq!(r.epochs_run, r.best_epoch + tc.patience + 1);
    }
    // The α dump comes from the restored best parameters.
    assert_eq!(r.gpr_weights.len(), tc.hops + 1);
    assert_eq!(r.gpr_weights, out.params.gpr_weights());
    assert_eq!(r.gates.len(), tc.hops);
    // Re-evaluating the restored parameters reproduces the best epoch.
    let mut d = data.clone();
    d.ensure_pe(tc.pe_dims).unwrap();
    let logits = predict(&d.input_features(), &d.graph, &tc, &out.params).unwrap();
    let val = evaluate(&logits, &d.labels, &splits.val, tc.metric).unwrap();
    assert_eq!(val, r.best_val_metric);
}

#[test]
fn non_finite_input_reports_divergence() {
    let mut data = small_sbm(4);
    data.features.as_mut_slice()[0] = f64::NAN;
    let splits = make_splits(60, [0.5, 0.25, 0.25], 4).unwrap();
    match train(&data, &splits, &small_config()) {
        Err(Error::Diverged { epoch: 0, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn rejects_overlapping_splits() {
    let data = small_sbm(5);
    let mut splits = make_splits(60, [0.5, 0.25, 0.25], 5).unwrap();
    splits.val.push(splits.train[0]);
    assert!(train(&data, &splits, &small_config()).is_err());
}

#[test]
fn hybrid_and_ablation_variants_train() {
    let data = small_sbm(6);
    let splits = make_splits(60, [0.5, 0.25, 0.25], 6).unwrap();
    for tc in [
        TrainConfig {
            hybrid_hops: Some(1),
            ..small_config()
        },
        TrainConfig {
            aggregation: Aggregation::Concat,
            gate_mode: GateMode::RawGate,
            ..small_config()
        },
        TrainConfig {
            aggregation: Aggregation::AttnReadout,
            gate_mode: GateMode::NoGate,
            ..small_config()
        },
        TrainConfig {
            metric: Metric::RocAuc,
            ..small_config()
        },
    ] {
        let out = train(&data, &splits, &tc).unwrap();
        assert!(out.report.best_val_metric > 0.5, "{tc:?}");
        out.params.validate(&tc.sta_config()).unwrap();
    }
}

#[test]
fn logistic_baseline_separates_sbm() {
    let data = small_sbm(7);
    let splits = make_splits(60, [0.5, 0.25, 0.25], 7).unwrap();
    let b = logistic_baseline(&data, &splits, 0.05, 200, Metric::Accuracy, 0).unwrap();
    assert!(b.test_metric >= 0.8, "{b:?}");
}

#[test]
fn dataset_mismatch_is_rejected() {
    let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
    let meta = DatasetMeta {
        name: "t".into(),
        original_labels: vec![0, 1],
    };
    assert!(Dataset::new(g, Matrix::zeros(2, 1), vec![0, 1, 0], meta).is_err());
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let data = small_sbm(6);
    let splits = make_splits(60, [0.5, 0.25, 0.25], 6).unwrap();
    let tc = TrainConfig {
        aggregation: Aggregation::Concat,
        ..small_config()
    };
    let out = train(&data, &splits, &tc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &out).unwrap();
    let (params, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(params.store, out.params.store);
    assert_eq!(meta, out.checkpoint_meta());
    let mut d = data.clone();
    d.ensure_pe(tc.pe_dims).unwrap();
    let a = predict(&d.input_features(), &d.graph, &meta.config, &params).unwrap();
    let b = predict(&d.input_features(), &d.graph, &tc, &out.params).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_with_wrong_shapes_rejected() {
    let data = small_sbm(7);
    let splits = make_splits(60, [0.5, 0.25, 0.25], 7).unwrap();
    let tc = TrainConfig {
        max_epochs: 2,
        patience: 1,
        ..small_config()
    };
    let mut out = train(&data, &splits, &tc).unwrap();
    out.report.config.hops = 3;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    save_checkpoint(&path, &out).unwrap();
    assert!(load_checkpoint(&path).is_err());
}
