//! Empirical checks of random-walk mixing and of STA_k approaching global
//! attention as `k` grows.
//!
//! Everything here is dense and independent of the spectral and attention
//! code paths except for `λ̂`, which comes from [`Graph::spectral_info`].
//! Powers are built by repeated multiplication of the deflated operator
//! `E = Â − π·1ᵀ`; because `Â·π = π` and `1ᵀ·Â = 1ᵀ`, `E^k = Â^k − π·1ᵀ`
//! exactly, and the deflated product keeps round-off from piling up on the
//! stationary direction.

use serde::{Deserialize, Serialize};

use crate::attention::feature_map;
use crate::error::{Error, Result};
use crate::graph::{Graph, TransitionKind};
use crate::matrix::Matrix;

/// Dense powers cost `O(N³)` per hop.
pub const MAX_NODES: usize = 512;

/// Tolerances for the measured mixing time.
pub const MIXING_EPSILONS: [f64; 3] = [1e-2, 1e-4, 1e-6];

/// Ratio entries whose global-attention value is at most this are excluded.
pub const DEGENERATE_THRESHOLD: f64 = 1e-9;

/// Relative slack on the asserted bound. The bound is exact; this only
/// absorbs round-off in `λ̂` and in the power iteration once both sides are
/// near machine precision.
pub const BOUND_SLACK: f64 = 1e-9;

/// Absolute slack for the same reason, relevant once `(1−λ̂)^k` underflows
/// the accumulated round-off of the dense products (about `N·1e-16`).
pub const BOUND_FLOOR: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingThreshold {
    pub epsilon: f64,
    /// Smallest `k` after which `D(k) ≤ ε` for every tested hop, if any.
    pub measured: Option<usize>,
    /// `ceil(ln(N/ε)/λ̂)`.
    pub predicted: usize,
}

impl MixingThreshold {
    pub fn within_prediction(&self) -> bool {
        self.measured.is_some_and(|m| m <= self.predicted)
    }
}

/// Per-hop deviation of `Â^k` from its limit. Vectors are indexed by `k`,
/// starting from `k = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub num_nodes: usize,
    pub num_edges: usize,
    pub d_max: usize,
    pub d_min: usize,
    pub spectral_gap: f64,
    pub k_max: usize,
    /// `D(k) = max_{i,j} |Â^k_ij − π_i|`.
    pub max_deviation: Vec<f64>,
    /// `‖Â^k e_j − π‖₁` for every column `j`.
    pub column_l1: Vec<Vec<f64>>,
    pub max_column_l1: Vec<f64>,
    /// `√(N·d_max/d_min)·(1−λ̂)^k`, the asserted bound.
    pub rigorous_bound: Vec<f64>,
    /// `N·e^{−kλ̂}`, the looser simplified curve. Reported, not asserted.
    pub simplified_bound: Vec<f64>,
    /// Column/hop pairs above the rigorous bound.
    pub bound_violations: usize,
    /// Column/hop pairs above the simplified curve.
    pub simplified_exceedances: usize,
    /// Whether `d_max/d_min ≤ √N`. The intermediate L2 step
    /// `(d_max/d_min)(1−λ̂)^k ≤ √N(1−λ̂)^k` needs it; the final curve does not,
    /// since the true L2 factor is `√(d_max/d_min) ≤ √N` on any simple graph.
    pub degree_ratio_within_sqrt_n: bool,
    pub thresholds: Vec<MixingThreshold>,
}

impl ConvergenceReport {
    pub fn passed(&self) -> bool {
        self.bound_violations == 0
            && self
                .thresholds
                .iter()
                .all(MixingThreshold::within_prediction)
    }

    /// `D(k+1)/D(k)`; the asymptotic value is `1 − λ̂`.
    pub fn contraction_ratios(&self) -> Vec<f64> {
        self.max_deviation.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioThreshold {
    pub eta: f64,
    pub lower: f64,
    pub upper: f64,
    /// Smallest `k` after which every included ratio stays in the band
    /// through `k_max`, if any.
    pub measured: Option<usize>,
    /// `ceil(2·ln(N/η)/λ̂)`.
    pub predicted: usize,
    /// Out-of-band entries summed over hops `k ≥ predicted`.
    pub violations_after_prediction: usize,
}

impl RatioThreshold {
    /// `None` when the prediction lies beyond `k_max` and nothing was tested.
    pub fn holds_from_prediction(&self, k_max: usize) -> Option<bool> {
        (self.predicted <= k_max).then_some(self.violations_after_prediction == 0)
    }
}

/// Entrywise `STA_k / SA` for `k = 0..=k_max`. `SA` is global attention with
/// a uniform weight per source, which is the limit of STA_k because every
/// column of `Â^k` tends to `π` and the row weight `π_i` cancels in the
/// normalisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub num_nodes: usize,
    pub spectral_gap: f64,
    pub k_max: usize,
    pub total_entries: usize,
    pub excluded_entries: usize,
    pub min_ratio: Vec<f64>,
    pub max_ratio: Vec<f64>,
    pub thresholds: Vec<RatioThreshold>,
    /// Range of `STA_{k_max} / SA_π`, where `SA_π` weights source `j` by
    /// `π_j`. On non-regular graphs this does not tend to one.
    pub source_weighted_ratio_range: (f64, f64),
}

impl RatioReport {
    pub fn excluded_fraction(&self) -> f64 {
        self.excluded_entries as f64 / self.total_entries.max(1) as f64
    }
}

struct Ergodic {
    gap: f64,
    pi: Vec<f64>,
    deflated: Matrix,
}

fn ergodic(g: &Graph) -> Result<Ergodic> {
    let n = g.num_nodes();
    if n == 0 || n > MAX_NODES {
        return Err(Error::invalid(format!(
            "dense checks need 1 ≤ N ≤ {MAX_NODES}, got {n}"
        )));
    }
    let info = g.spectral_info();
    if !info.is_connected || info.is_bipartite {
        return Err(Error::NotErgodic {
            connected: info.is_connected,
            bipartite: info.is_bipartite,
        });
    }
    let pi = g.stationary_distribution();
    let mut deflated = g.dense_transition(TransitionKind::RandomWalk);
    for i in 0..n {
        for j in 0..n {
            deflated[(i, j)] -= pi[i];
        }
    }
    Ok(Ergodic {
        gap: info.spectral_gap,
        pi,
        deflated,
    })
}

/// `E^0 = I − π1ᵀ`, `E^1`, ..., `E^{k_max}` fed to `visit` one at a time.
fn for_each_power(
    e: &Ergodic,
    k_max: usize,
    mut visit: impl FnMut(usize, &Matrix) -> Result<()>,
) -> Result<()> {
    let n = e.pi.len();
    let mut p = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            p[(i, j)] -= e.pi[i];
        }
    }
    visit(0, &p)?;
    for k in 1..=k_max {
        p = e.deflated.matmul(&p)?;
        visit(k, &p)?;
    }
    Ok(())
}

fn ln_ceil(x: f64, gap: f64) -> usize {
    // Guard against 10.000000000000002 becoming 11.
    let v = x / gap;
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r as usize
    } else {
        v.ceil() as usize
    }
}

/// Measures `D(k)` and the column L1 deviations for `k ≤ k_max`, checks them
/// against `√(N·d_max/d_min)·(1−λ̂)^k` and compares the measured mixing time
/// with `ln(N/ε)/λ̂`.
pub fn verify_mixing(g: &Graph, k_max: usize) -> Result<ConvergenceReport> {
    let e = ergodic(g)?;
    let n = g.num_nodes();
    let nf = n as f64;
    let d_max = g.degrees().iter().copied().max().unwrap_or(0);
    let d_min = g.degrees().iter().copied().min().unwrap_or(0);
    let prefactor = (nf * d_max as f64 / d_min as f64).sqrt();

    let mut max_deviation = Vec::with_capacity(k_max + 1);
    let mut column_l1 = Vec::with_capacity(k_max + 1);
    for_each_power(&e, k_max, |_, p| {
        if !p.is_finite() {
            return Err(Error::NonFinite {
                op: "verify_mixing",
            });
        }
        max_deviation.push(p.max_abs());
        let mut l1 = vec![0.0; n];
        for i in 0..n {
            for (j, x) in p.row(i).iter().enumerate() {
                l1[j] += x.abs();
            }
        }
        column_l1.push(l1);
        Ok(())
    })?;

    let rigorous_bound: Vec<f64> = (0..=k_max)
        .map(|k| prefactor * (1.0 - e.gap).powi(k as i32))
        .collect();
    let simplified_bound: Vec<f64> = (0..=k_max)
        .map(|k| nf * (-(k as f64) * e.gap).exp())
        .collect();
    let mut bound_violations = 0;
    let mut simplified_exceedances = 0;
    for (k, cols) in column_l1.iter().enumerate() {
        let limit = rigorous_bound[k] * (1.0 + BOUND_SLACK) + BOUND_FLOOR;
        bound_violations += cols.iter().filter(|&&x| x > limit).count();
        simplified_exceedances += cols.iter().filter(|&&x| x > simplified_bound[k]).count();
    }
    let max_column_l1 = column_l1
        .iter()
        .map(|c| c.iter().copied().fold(0.0, f64::max))
        .collect();

    let thresholds = MIXING_EPSILONS
        .iter()
        .map(|&eps| MixingThreshold {
            epsilon: eps,
            measured: settles_at(&max_deviation, |d| d <= eps),
            predicted: ln_ceil((nf / eps).ln(), e.gap),
        })
        .collect();

    Ok(ConvergenceReport {
        num_nodes: n,
        num_edges: g.num_edges(),
        d_max,
        d_min,
        spectral_gap: e.gap,
        k_max,
        max_deviation,
        column_l1,
        max_column_l1,
        rigorous_bound,
        simplified_bound,
        bound_violations,
        simplified_exceedances,
        degree_ratio_within_sqrt_n: (d_max as f64 / d_min as f64) <= nf.sqrt(),
        thresholds,
    })
}

/// First index after which `ok` holds through the end of `xs`.
fn settles_at<T: Copy>(xs: &[T], ok: impl Fn(T) -> bool) -> Option<usize> {
    match xs.iter().rposition(|&x| !ok(x)) {
        None => Some(0),
        Some(last) if last + 1 < xs.len() => Some(last + 1),
        Some(_) => None,
    }
}

/// Row-normalised attention with an arbitrary non-negative source weighting
/// `w`: `out_i = Σ_t w_it s_it V_t / Σ_t w_it s_it`. No ε guard, so the
/// ratio is taken between the exact expressions.
fn weighted_attention(
    w: impl Fn(usize, usize) -> f64,
    fq: &Matrix,
    fk: &Matrix,
    v: &Matrix,
) -> Matrix {
    let n = fq.rows();
    let mut out = Matrix::zeros(n, v.cols());
    let mut row = vec![0.0; v.cols()];
    for i in 0..n {
        row.iter_mut().for_each(|x| *x = 0.0);
        let mut den = 0.0;
        for t in 0..n {
            let wt = w(i, t);
            if wt == 0.0 {
                continue;
            }
            let s: f64 = fq
                .row(i)
                .iter()
                .zip(fk.row(t))
                .map(|(a, b)| a * b)
                .sum::<f64>()
                * wt;
            den += s;
            for (o, x) in row.iter_mut().zip(v.row(t)) {
                *o += s * x;
            }
        }
        for (o, x) in out.row_mut(i).iter_mut().zip(&row) {
            *o = x / den;
        }
    }
    out
}

/// Tracks `STA_k / SA` entrywise against the bands
/// `[(1−η)/(1+η), (1+η)/(1−η)]` for each `η` in `etas`.
pub fn verify_sta_sa_ratio(
    g: &Graph,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    k_max: usize,
    etas: &[f64],
) -> Result<RatioReport> {
    let n = g.num_nodes();
    if q.rows() != n || k.rows() != n || v.rows() != n {
        return Err(Error::shape(
            "verify_sta_sa_ratio",
            format!("{n} rows"),
            format!("{}, {}, {}", q.rows(), k.rows(), v.rows()),
        ));
    }
    if q.cols() != k.cols() {
        return Err(Error::shape(
            "verify_sta_sa_ratio",
            format!("key width {}", q.cols()),
            k.shape_str(),
        ));
    }
    if let Some(x) = v.as_slice().iter().find(|x| x.is_nan() || **x < 0.0) {
        return Err(Error::invalid(format!(
            "values must be non-negative, found {x}"
        )));
    }
    if let Some(&eta) = etas.iter().find(|&&e| !(e > 0.0 && e < 1.0)) {
        return Err(Error::invalid(format!("η must lie in (0, 1), got {eta}")));
    }
    let e = ergodic(g)?;
    let (fq, fk) = (feature_map(q), feature_map(k));
    let sa = weighted_attention(|_, _| 1.0, &fq, &fk, v);
    let included: Vec<bool> = sa
        .as_slice()
        .iter()
        .map(|x| x.abs() > DEGENERATE_THRESHOLD)
        .collect();
    let excluded_entries = included.iter().filter(|&&b| !b).count();
    if excluded_entries == included.len() {
        return Err(Error::invalid(
            "every global-attention entry is below the degeneracy threshold",
        ));
    }

    let bands: Vec<(f64, f64)> = etas
        .iter()
        .map(|&eta| ((1.0 - eta) / (1.0 + eta), (1.0 + eta) / (1.0 - eta)))
        .collect();
    let mut in_band = vec![Vec::with_capacity(k_max + 1); etas.len()];
    let mut out_of_band = vec![Vec::with_capacity(k_max + 1); etas.len()];
    let (mut min_ratio, mut max_ratio) = (Vec::new(), Vec::new());
    let mut last = Matrix::zeros(0, 0);
    for_each_power(&e, k_max, |hop, p| {
        // Undo the deflation to recover Â^k.
        let sta = weighted_attention(|i, t| p[(i, t)] + e.pi[i], &fq, &fk, v);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut outside = vec![0usize; bands.len()];
        for ((s, a), &inc) in sta.as_slice().iter().zip(sa.as_slice()).zip(&included) {
            if !inc {
                continue;
            }
            let r = s / a;
            if !r.is_finite() {
                return Err(Error::NonFinite {
                    op: "verify_sta_sa_ratio",
                });
            }
            lo = lo.min(r);
            hi = hi.max(r);
            for (c, &(l, u)) in outside.iter_mut().zip(&bands) {
                if r < l || r > u {
                    *c += 1;
                }
            }
        }
        min_ratio.push(lo);
        max_ratio.push(hi);
        for (b, c) in outside.into_iter().enumerate() {
            in_band[b].push(c == 0);
            out_of_band[b].push(c);
        }
        if hop == k_max {
            last = sta;
        }
        Ok(())
    })?;

    let nf = n as f64;
    let thresholds = etas
        .iter()
        .enumerate()
        .map(|(b, &eta)| {
            let predicted = ln_ceil(2.0 * (nf / eta).ln(), e.gap);
            RatioThreshold {
                eta,
                lower: bands[b].0,
                upper: bands[b].1,
                measured: settles_at(&in_band[b], |ok| ok),
                predicted,
                violations_after_prediction: out_of_band[b].iter().skip(predicted).sum(),
            }
        })
        .collect();

    let sa_pi = weighted_attention(|_, t| e.pi[t], &fq, &fk, v);
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    for ((s, a), &inc) in last.as_slice().iter().zip(sa_pi.as_slice()).zip(&included) {
        if inc && a.abs() > DEGENERATE_THRESHOLD {
            range.0 = range.0.min(s / a);
            range.1 = range.1.max(s / a);
        }
    }

    Ok(RatioReport {
        num_nodes: n,
        spectral_gap: e.gap,
        k_max,
        total_entries: included.len(),
        excluded_entries,
        min_ratio,
        max_ratio,
        thresholds,
        source_weighted_ratio_range: range,
    })
}
