//! Run configuration: one TOML file holding the dataset source, training
//! hyperparameters, output directory and per-command knobs. Unknown keys are
//! rejected everywhere.
//!
//! ```toml
//! out_dir = "runs/sbm"
//!
//! [dataset]
//! kind = "sbm"
//! blocks = 2
//! per_block = 200
//! p_in = 0.05
//! p_out = 0.005
//! signal = 3.0
//!
//! [train]
//! hops = 5
//! lr = 0.01
//! ```
//!
//! The run seed is `train.seed`; every command draws from it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{hex, load_dataset, synth_sbm, Dataset, SbmSpec};
use crate::error::{Error, Result};
use crate::model::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Sbm {
        blocks: usize,
        per_block: usize,
        p_in: f64,
        p_out: f64,
        signal: f64,
    },
    Files {
        edges: PathBuf,
        features: PathBuf,
        labels: PathBuf,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Sbm {
            blocks: 2,
            per_block: 200,
            p_in: 0.05,
            p_out: 0.005,
            signal: 3.0,
        }
    }
}

impl DatasetSource {
    /// Relative file paths resolve against `base`, normally the config's
    /// directory.
    pub fn load(&self, seed: u64, base: Option<&Path>) -> Result<Dataset> {
        match self {
            &DatasetSource::Sbm {
                blocks,
                per_block,
                p_in,
                p_out,
                signal,
            } => synth_sbm(
                SbmSpec {
                    blocks,
                    per_block,
                    p_in,
                    p_out,
                    signal,
                },
                seed,
            ),
            DatasetSource::Files {
                edges,
                features,
                labels,
            } => {
                let at = |p: &PathBuf| match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                load_dataset(&at(edges), &at(features), &at(labels))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleCheckConfig {
    pub graphs: usize,
    pub sizes: Vec<usize>,
    pub max_hops: usize,
    pub heads: Vec<usize>,
    pub head_dim: usize,
    pub tolerance: f64,
}

impl Default for OracleCheckConfig {
    fn default() -> Self {
        Self {
            graphs: 50,
            sizes: vec![8, 16, 32, 64],
            max_hops: 5,
            heads: vec![1, 2, 4],
            head_dim: 4,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremConfig {
    /// Size of the generated graph when no dataset file is given.
    pub nodes: usize,
    pub edge_prob: f64,
    pub k_max: usize,
    pub etas: Vec<f64>,
    pub value_dim: usize,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        Self {
            nodes: 64,
            edge_prob: 0.1,
            k_max: 200,
            etas: vec![0.3, 0.1],
            value_dim: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub nodes: usize,
    /// Edge counts for the fixed-N sweep.
    pub edge_counts: Vec<usize>,
    pub hops: usize,
    /// Q/K/V width `d`, split over `heads`.
    pub dim: usize,
    pub heads: usize,
    /// Node counts for the dense-vs-efficient sweep, at `avg_degree`.
    pub dense_nodes: Vec<usize>,
    pub avg_degree: usize,
    /// Hop counts for the monotonicity sweep on the first fixed-N graph.
    pub hop_sweep: Vec<usize>,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            nodes: 4096,
            edge_counts: vec![32_768, 65_536, 131_072],
            hops: 4,
            dim: 32,
            heads: 1,
            dense_nodes: vec![512, 1024],
            avg_degree: 8,
            hop_sweep: vec![1, 2, 4, 8],
            repeats: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: SplitName,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub dataset: DatasetSource,
    pub train: TrainConfig,
    pub oracle_check: OracleCheckConfig,
    pub theorem: TheoremConfig,
    pub bench: BenchConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            dataset: DatasetSource::default(),
            train: TrainConfig::default(),
            oracle_check: OracleCheckConfig::default(),
            theorem: TheoremConfig::default(),
            bench: BenchConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train
            .validate()
            .map_err(|e| Error::Config(format!("[train] {e}")))?;
        if let DatasetSource::Sbm {
            p_in,
            p_out,
            signal,
            blocks,
            per_block,
        } = self.dataset
        {
            if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) {
                return Err(Error::Config(format!(
                    "[dataset] p_in {p_in} and p_out {p_out} must be probabilities"
                )));
            }
            if !(signal > 0.0 && signal.is_finite()) {
                return Err(Error::Config(format!(
                    "[dataset] signal {signal} must be positive"
                )));
            }
            positive("[dataset] blocks", blocks)?;
            positive("[dataset] per_block", per_block)?;
        }
        let o = &self.oracle_check;
        positive("[oracle_check] head_dim", o.head_dim)?;
        if o.sizes.is_empty() || o.heads.is_empty() || o.sizes.contains(&0) || o.heads.contains(&0)
        {
            return Err(Error::Config(
                "[oracle_check] sizes and heads must be non-empty and positive".into(),
            ));
        }
        if o.tolerance.is_nan() || o.tolerance <= 0.0 {
            return Err(Error::Config(
                "[oracle_check] tolerance must be positive".into(),
            ));
        }
        let t = &self.theorem;
        if t.nodes < 3 || t.nodes > crate::theory::MAX_NODES {
            return Err(Error::Config(format!(
                "[theorem] nodes must lie in 3..={}",
                crate::theory::MAX_NODES
            )));
        }
        if !(0.0..=1.0).contains(&t.edge_prob) || t.etas.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
            return Err(Error::Config(
                "[theorem] edge_prob must be a probability and every eta in (0, 1)".into(),
            ));
        }
        positive("[theorem] value_dim", t.value_dim)?;
        let b = &self.bench;
        for (name, v) in [
            ("nodes", b.nodes),
            ("hops", b.hops),
            ("heads", b.heads),
            ("repeats", b.repeats),
            ("avg_degree", b.avg_degree),
        ] {
            positive(&format!("[bench] {name}"), v)?;
        }
        if b.dim == 0 || !b.dim.is_multiple_of(b.heads) {
            return Err(Error::Config(format!(
                "[bench] dim {} must be a positive multiple of heads {}",
                b.dim, b.heads
            )));
        }
        let max_edges = b.nodes * (b.nodes - 1) / 2;
        if let Some(&m) = b
            .edge_counts
            .iter()
            .find(|&&m| m + 1 < b.nodes || m > max_edges)
        {
            return Err(Error::Config(format!(
                "[bench] {m} edges cannot form a connected simple graph on {} nodes",
                b.nodes
            )));
        }
        Ok(())
    }
}
