//! `sta`: train, evaluate and inspect STAGNN, and run the numerical checks.
//!
//! Exit codes: 0 success, 1 validation error, 2 numerical-check failure,
//! 3 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use sta_core::attention::{sta_all_hops, sta_k_dense_oracle};
use sta_core::config::{DatasetSource, RunConfig, SplitName};
use sta_core::data::{erdos_renyi_ergodic, random_connected_graph, Dataset};
use sta_core::model::{
    evaluate, load_checkpoint, make_splits, predict, save_checkpoint, train, Splits,
};
use sta_core::theory::{verify_mixing, verify_sta_sa_ratio};
use sta_core::{bench, rng, Error, Matrix};

#[derive(Parser, Debug)]
#[command(
    name = "sta",
    version,
    about = "SubTree Attention: training, checks and benchmarks"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Hop count K. For `verify-theorem1` this is the largest power checked.
    #[arg(long, visible_alias = "hops", global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    heads: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    lr: Option<f64>,
    /// `sbm`, a directory holding edges.txt / features.csv / labels.txt, or
    /// three comma-separated paths `edges,features,labels`.
    #[arg(long, global = true)]
    dataset: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train STAGNN; writes train_report.json and model.ckpt.
    Train,
    /// Score a checkpoint on one split; writes eval.json.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Compare efficient STA with the dense oracle on random graphs.
    OracleCheck,
    /// Mixing and STA/SA ratio checks on the given or a generated graph.
    #[command(name = "verify-theorem1")]
    VerifyTheorem1,
    /// Time the efficient and dense paths; writes bench.csv and bench.json.
    Bench,
    /// Extract hop weights and gates from a checkpoint to JSON and CSV.
    GprDump {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitName::Train,
            SplitArg::Val => SplitName::Val,
            SplitArg::Test => SplitName::Test,
        }
    }
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Numerical(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "validation error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical check failed: {m}"),
            Failure::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::NonFinite { .. } | Error::Diverged { .. } => Failure::Numerical(msg),
            Error::Io { .. } | Error::Checkpoint(_) => Failure::Io(msg),
            _ => Failure::Validation(msg),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

struct Run {
    cfg: RunConfig,
    base: Option<PathBuf>,
    hash: String,
}

impl Run {
    fn seed(&self) -> u64 {
        self.cfg.seed()
    }

    fn out_dir(&self) -> Outcome<&Path> {
        let dir = self.cfg.out_dir.as_path();
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Outcome<PathBuf> {
        let path = self.out_dir()?.join(name);
        let text = serde_json::to_string_pretty(value).expect("reports serialise");
        fs::write(&path, text + "\n")
            .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    fn dataset(&self, seed: u64) -> Outcome<Dataset> {
        Ok(self.cfg.dataset.load(seed, self.base.as_deref())?)
    }
}

fn parse_dataset(spec: &str) -> Outcome<DatasetSource> {
    if spec == "sbm" {
        return Ok(DatasetSource::default());
    }
    let parts: Vec<&str> = spec.split(',').collect();
    let (edges, features, labels) = match parts.as_slice() {
        [e, f, l] => (PathBuf::from(e), PathBuf::from(f), PathBuf::from(l)),
        [dir] => {
            let d = Path::new(dir);
            if !d.is_dir() {
                return Err(Failure::Validation(format!(
                    "--dataset {spec}: expected `sbm`, a directory or three paths"
                )));
            }
            (
                d.join("edges.txt"),
                d.join("features.csv"),
                d.join("labels.txt"),
            )
        }
        _ => {
            return Err(Failure::Validation(format!(
                "--dataset {spec}: expected `sbm`, a directory or three paths"
            )))
        }
    };
    Ok(DatasetSource::Files {
        edges,
        features,
        labels,
    })
}

/// Prints one line to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(line: impl std::fmt::Display) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn resolve(common: &Common, command: &Command) -> Outcome<Run> {
    let (mut cfg, base) = match &common.config {
        Some(path) => (
            RunConfig::load(path)?,
            path.parent()
                .map(Path::to_path_buf)
                .filter(|p| !p.as_os_str().is_empty()),
        ),
        None => (RunConfig::default(), None),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(h) = common.heads {
        cfg.train.heads = h;
        cfg.bench.heads = h;
    }
    if let Some(lr) = common.lr {
        cfg.train.lr = lr;
    }
    if let Some(k) = common.k {
        match command {
            Command::VerifyTheorem1 => cfg.theorem.k_max = k,
            Command::Bench => cfg.bench.hops = k,
            Command::OracleCheck => cfg.oracle_check.max_hops = k,
            _ => cfg.train.hops = k,
        }
    }
    if let Some(d) = &common.dataset {
        cfg.dataset = parse_dataset(d)?;
    }
    if let Command::Eval { checkpoint, split } = command {
        if checkpoint.is_some() {
            cfg.eval.checkpoint = checkpoint.clone();
        }
        if let Some(s) = split {
            cfg.eval.split = (*s).into();
        }
    }
    cfg.validate()?;
    let hash = cfg.hash();
    Ok(Run { cfg, base, hash })
}

fn cmd_train(run: &Run) -> Outcome<()> {
    let tc = &run.cfg.train;
    let data = run.dataset(tc.seed)?;
    let splits = make_splits(data.num_nodes(), tc.split, tc.seed)?;
    let outcome = train(&data, &splits, tc)?;
    let report = json!({
        "seed": run.seed(),
        "config_hash": run.hash,
        "dataset": data.meta.name,
        "dataset_fingerprint": data.fingerprint(),
        "report": outcome.report,
    });
    run.write_json("train_report.json", &report)?;
    let ckpt = run.out_dir()?.join("model.ckpt");
    save_checkpoint(&ckpt, &outcome)?;
    emit(json!({
            "command": "train",
            "seed": run.seed(),
            "config_hash": run.hash,
            "best_epoch": outcome.report.best_epoch,
            "best_val_metric": outcome.report.best_val_metric,
            "test_at_best": outcome.report.test_at_best,
            "checkpoint": ckpt,
    }));
    Ok(())
}

fn checkpoint_path(run: &Run, explicit: Option<&PathBuf>) -> Outcome<PathBuf> {
    let p = explicit
        .cloned()
        .or_else(|| run.cfg.eval.checkpoint.clone())
        .unwrap_or_else(|| run.cfg.out_dir.join("model.ckpt"));
    Ok(p)
}

fn split_of(splits: &Splits, name: SplitName) -> &[usize] {
    match name {
        SplitName::Train => &splits.train,
        SplitName::Val => &splits.val,
        SplitName::Test => &splits.test,
    }
}

fn cmd_eval(run: &Run) -> Outcome<()> {
    let path = checkpoint_path(run, None)?;
    let (params, meta) = load_checkpoint(&path)?;
    // Data and splits follow the checkpoint's own configuration.
    let tc = &meta.config;
    let mut data = run.dataset(tc.seed)?;
    data.ensure_pe(tc.pe_dims)?;
    let x = data.input_features();
    if x.cols() != params.in_dim || data.num_classes != params.num_classes {
        return Err(Failure::Validation(format!(
            "checkpoint expects {} inputs and {} classes, dataset gives {} and {}",
            params.in_dim,
            params.num_classes,
            x.cols(),
            data.num_classes
        )));
    }
    let splits = make_splits(data.num_nodes(), tc.split, tc.seed)?;
    let logits = predict(&x, &data.graph, tc, &params)?;
    let split = run.cfg.eval.split;
    let value = evaluate(&logits, &data.labels, split_of(&splits, split), tc.metric)?;
    let report = json!({
        "command": "eval",
        "seed": tc.seed,
        "config_hash": run.hash,
        "checkpoint_config_hash": meta.config_hash,
        "checkpoint": path,
        "split": split,
        "metric": tc.metric,
        "value": value,
    });
    run.write_json("eval.json", &report)?;
    emit(&report);
    Ok(())
}

fn cmd_oracle_check(run: &Run) -> Outcome<()> {
    let oc = &run.cfg.oracle_check;
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for idx in 0..oc.graphs {
        let mut r = rng::derive(run.seed(), idx as u64);
        let n = oc.sizes[idx % oc.sizes.len()];
        let heads = oc.heads[idx % oc.heads.len()];
        let hops = 1 + idx % oc.max_hops.max(1);
        let density = 0.02 + 0.48 * idx as f64 / oc.graphs.max(2).saturating_sub(1) as f64;
        let g = Arc::new(random_connected_graph(n, density, &mut r)?);
        let w = heads * oc.head_dim;
        let q = Matrix::random_uniform(n, w, -1.5, 1.5, &mut r);
        let k = Matrix::random_uniform(n, w, -1.5, 1.5, &mut r);
        let v = Matrix::random_uniform(n, w, -1.5, 1.5, &mut r);
        let fast = sta_all_hops(&g, hops, heads, &q, &k, &v)?;
        let mut dev = 0.0f64;
        for (hop, out) in fast.iter().enumerate() {
            for h in 0..heads {
                let s = |m: &Matrix| m.slice_cols(h * oc.head_dim, oc.head_dim);
                dev = dev.max(
                    sta_k_dense_oracle(&g, hop, &s(&q), &s(&k), &s(&v))?.max_abs_diff(&s(out)),
                );
            }
        }
        worst = worst.max(dev);
        rows.push(json!({"nodes": n, "edges": g.num_edges(), "hops": hops, "heads": heads, "max_deviation": dev}));
    }
    let pass = worst < oc.tolerance;
    let report = json!({
        "command": "oracle-check",
        "seed": run.seed(),
        "config_hash": run.hash,
        "tolerance": oc.tolerance,
        "max_deviation": worst,
        "pass": pass,
        "graphs": rows,
    });
    run.write_json("oracle_check.json", &report)?;
    emit(format_args!(
        "max deviation {worst:.3e} over {} graphs (tolerance {:e})",
        oc.graphs, oc.tolerance
    ));
    if pass {
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "deviation {worst:.3e} exceeds {:e}",
            oc.tolerance
        )))
    }
}

fn cmd_verify_theorem1(run: &Run) -> Outcome<()> {
    let t = &run.cfg.theorem;
    let graph = match run.cfg.dataset {
        DatasetSource::Files { .. } => Arc::unwrap_or_clone(run.dataset(run.seed())?.graph),
        DatasetSource::Sbm { .. } => {
            erdos_renyi_ergodic(t.nodes, t.edge_prob, &mut rng::seeded(run.seed()))?
        }
    };
    let n = graph.num_nodes();
    let mixing = verify_mixing(&graph, t.k_max)?;
    let mut r = rng::derive(run.seed(), 1);
    let q = Matrix::random_uniform(n, t.value_dim, -1.0, 1.0, &mut r);
    let k = Matrix::random_uniform(n, t.value_dim, -1.0, 1.0, &mut r);
    let v = Matrix::random_uniform(n, t.value_dim, 0.0, 1.0, &mut r);
    let ratio = verify_sta_sa_ratio(&graph, &q, &k, &v, t.k_max, &t.etas)?;
    let band_failures: Vec<f64> = ratio
        .thresholds
        .iter()
        .filter(|th| th.holds_from_prediction(t.k_max) == Some(false))
        .map(|th| th.eta)
        .collect();
    let report = json!({
        "command": "verify-theorem1",
        "seed": run.seed(),
        "config_hash": run.hash,
        "mixing": mixing,
        "ratio": ratio,
    });
    run.write_json("theorem1.json", &report)?;
    emit(format_args!(
        "N={n} λ̂={:.4}: bound violations {}, K₀ {:?}; ratio bands failing for η {:?}; excluded {}/{}",
        mixing.spectral_gap,
        mixing.bound_violations,
        mixing.thresholds.iter().map(|th| (th.epsilon, th.measured, th.predicted)).collect::<Vec<_>>(),
        band_failures,
        ratio.excluded_entries,
        ratio.total_entries
    ));
    // K₀ beyond k_max is undecided, not a failure.
    let k0_fail = mixing
        .thresholds
        .iter()
        .any(|th| th.predicted <= t.k_max && !th.within_prediction());
    if mixing.bound_violations > 0 || k0_fail || !band_failures.is_empty() {
        return Err(Failure::Numerical(
            "theorem check violated; see theorem1.json".into(),
        ));
    }
    Ok(())
}

fn cmd_bench(run: &Run) -> Outcome<()> {
    let rows = bench::run_all(&run.cfg.bench, run.seed())?;
    let path = run.out_dir()?.join("bench.csv");
    let file =
        fs::File::create(&path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    bench::write_csv(&rows, run.seed(), &run.hash, file)?;
    let summary = bench::summarize(&rows);
    let report = json!({
        "command": "bench",
        "seed": run.seed(),
        "config_hash": run.hash,
        "csv": path,
        "summary": summary,
    });
    run.write_json("bench.json", &report)?;
    emit(&report);
    Ok(())
}

fn cmd_gpr_dump(run: &Run, explicit: Option<&PathBuf>) -> Outcome<()> {
    let path = checkpoint_path(run, explicit)?;
    let (params, meta) = load_checkpoint(&path)?;
    let sta = meta.config.sta_config();
    let alphas = params.gpr_weights();
    let to_rows = |m: Option<&Matrix>| -> Vec<Vec<f64>> {
        m.map(|m| (0..m.rows()).map(|r| m.row(r).to_vec()).collect())
            .unwrap_or_default()
    };
    let gates = params.effective_gates(&sta);
    let report = json!({
        "command": "gpr-dump",
        "seed": meta.config.seed,
        "config_hash": run.hash,
        "checkpoint_config_hash": meta.config_hash,
        "checkpoint": path,
        "gate_mode": sta.gate_mode,
        "gpr_weights": alphas,
        "gates": to_rows(gates.as_ref()),
        "raw_gates": to_rows(params.raw_gates()),
    });
    run.write_json("gpr.json", &report)?;

    let mut csv = format!(
        "# seed={} config_hash={}\nkind,hop,head,value\n",
        meta.config.seed, meta.config_hash
    );
    for (k, a) in alphas.iter().enumerate() {
        csv.push_str(&format!("alpha,{k},,{a}\n"));
    }
    if let Some(g) = &gates {
        for k in 0..g.rows() {
            for (h, x) in g.row(k).iter().enumerate() {
                csv.push_str(&format!("gate,{},{h},{x}\n", k + 1));
            }
        }
    }
    let csv_path = run.out_dir()?.join("gpr.csv");
    fs::write(&csv_path, csv).map_err(|e| Failure::Io(format!("{}: {e}", csv_path.display())))?;
    emit(&report);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            // Usage mistakes are validation errors, not numerical failures.
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = resolve(&cli.common, &cli.command).and_then(|run| match &cli.command {
        Command::Train => cmd_train(&run),
        Command::Eval { .. } => cmd_eval(&run),
        Command::OracleCheck => cmd_oracle_check(&run),
        Command::VerifyTheorem1 => cmd_verify_theorem1(&run),
        Command::Bench => cmd_bench(&run),
        Command::GprDump { checkpoint } => cmd_gpr_dump(&run, checkpoint.as_ref()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("sta: {f}");
            ExitCode::from(f.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_spec_forms() {
        assert!(matches!(
            parse_dataset("sbm").unwrap(),
            DatasetSource::Sbm { .. }
        ));
        match parse_dataset("e.txt,f.csv,l.txt").unwrap() {
            DatasetSource::Files { edges, labels, .. } => {
                assert_eq!(edges, PathBuf::from("e.txt"));
                assert_eq!(labels, PathBuf::from("l.txt"));
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_dataset("no/such/dir").is_err());
        assert!(parse_dataset("a,b").is_err());
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        let code = |e: Error| Failure::from(e).code();
        assert_eq!(code(Error::Config("x".into())), 1);
        assert_eq!(
            code(Error::NotErgodic {
                connected: false,
                bipartite: false
            }),
            1
        );
        assert_eq!(
            code(Error::Diverged {
                epoch: 3,
                loss: f64::NAN
            }),
            2
        );
        assert_eq!(code(Error::Checkpoint("x".into())), 3);
    }

    #[test]
    fn k_flag_targets_the_subcommand() {
        let common = Common {
            k: Some(7),
            ..Common::default()
        };
        assert_eq!(
            resolve(&common, &Command::VerifyTheorem1)
                .unwrap()
                .cfg
                .theorem
                .k_max,
            7
        );
        assert_eq!(resolve(&common, &Command::Bench).unwrap().cfg.bench.hops, 7);
        assert_eq!(resolve(&common, &Command::Train).unwrap().cfg.train.hops, 7);
    }
}
