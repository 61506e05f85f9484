//! Statistical distances. TV follows the convention `TV(p, q) = ∫ |p − q|`,
//! which ranges over `[0, 2]`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::DiffusedOracle;
use crate::quad::{tensor_for_each, GaussLegendre};
use crate::rng::{derive_seed, stream};
use crate::samples::Samples;
use crate::score::ScoreFunction;
use crate::score_matching::{mean_with_se, LossEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TvMethod {
    GridQuadrature,
    Histogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvEstimate {
    pub value: f64,
    pub method: TvMethod,
    /// Panels (quadrature) or bins (histogram) per axis.
    pub resolution: usize,
    /// Quadrature: change under panel doubling. Histogram: the expected
    /// histogram TV of an exact sampler with the same sample size (the
    /// noise floor).
    pub error_estimate: f64,
    /// Histogram only: fraction of samples outside the cube (counted in `value`).
    pub outside_mass: f64,
}

/// Tensor Gauss–Legendre quadrature of `∫|p − q|` over the box
/// `[lo, hi]^d` (`d ≤ 3`) with `panels` equal panels per axis; the error
/// estimate compares against `panels / 2`.
pub fn tv_density_vs_density<P, Q>(p: P, q: Q, dim: usize, lo: f64, hi: f64, panels: usize) -> Result<TvEstimate>
where
    P: Fn(&[f64]) -> f64 + Sync,
    Q: Fn(&[f64]) -> f64 + Sync,
{
    if dim == 0 || dim > 3 {
        return Err(Error::Unsupported(format!("grid TV supports 1 <= d <= 3, got {dim}")));
    }
    if !(hi > lo) || panels < 2 {
        return Err(Error::Domain("need hi > lo and at least two panels".into()));
    }
    let gl = GaussLegendre::new(8);
    let integrate = |panels: usize| {
        let axis = gl.composite(lo, hi, panels);
        let axes = vec![axis; dim];
        let mut total = 0.0;
        tensor_for_each(&axes, |x, w| total += w * (p(x) - q(x)).abs());
        total
    };
    let fine = integrate(panels);
    let coarse = integrate(panels / 2);
    Ok(TvEstimate {
        value: fine.clamp(0.0, 2.0),
        method: TvMethod::GridQuadrature,
        resolution: panels,
        error_estimate: (fine - coarse).abs(),
        outside_mass: 0.0,
    })
}

/// Default histogram resolution `⌈2 n^{1/(d+2)}⌉` bins per axis.
pub fn default_bins(n: usize, dim: usize) -> usize {
    (2.0 * (n as f64).powf(1.0 / (dim as f64 + 2.0))).ceil() as usize
}

/// Histogram TV between samples and a density on `[-1, 1]^d` (`d ≤ 4`):
/// `Σ_cells |N_c/n − P_c| + (fraction outside the cube)`, with `P_c` the
/// density's mass on the cell by Gauss–Legendre quadrature. This lower-bounds
/// the TV of the smoothed law, not the sampler's density itself.
pub fn tv_samples_vs_density<P>(samples: &Samples, density: P, bins: Option<usize>) -> Result<TvEstimate>
where
    P: Fn(&[f64]) -> f64 + Sync,
{
    let n = samples.len();
    let d = samples.dim();
    if n == 0 {
        return Err(Error::Domain("no samples".into()));
    }
    if d > 4 {
        return Err(Error::Unsupported(format!("histogram TV supports d <= 4, got {d}")));
    }
    let k = bins.unwrap_or_else(|| default_bins(n, d)).max(1);
    let cells = k.pow(d as u32);
    let mut counts = vec![0usize; cells];
    let mut outside = 0usize;
    for row in samples.rows() {
        if row.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            outside += 1;
            continue;
        }
        let mut idx = 0;
        for &v in row.iter().rev() {
            let b = (((v + 1.0) / 2.0 * k as f64) as usize).min(k - 1);
            idx = idx * k + b;
        }
        counts[idx] += 1;
    }
    let probs = cell_masses(&density, d, k);
    let nf = n as f64;
    let mut value = outside as f64 / nf;
    let mut floor = 0.0;
    for (c, p) in counts.iter().zip(&probs) {
        value += (*c as f64 / nf - p).abs();
        // E|Bin(n, p)/n − p| ≈ sqrt(2 p (1 − p) / (π n)) for moderate n p
        floor += (2.0 * p * (1.0 - p) / (std::f64::consts::PI * nf)).sqrt();
    }
    Ok(TvEstimate {
        value: value.clamp(0.0, 2.0),
        method: TvMethod::Histogram,
        resolution: k,
        error_estimate: floor,
        outside_mass: outside as f64 / nf,
    })
}

/// Density mass of each cell of the `k^d` partition of the cube; cell
/// index has coordinate 0 varying fastest.
fn cell_masses<P: Fn(&[f64]) -> f64 + Sync>(density: &P, d: usize, k: usize) -> Vec<f64> {
    let nodes = if d <= 2 { 6 } else { 3 };
    let gl = GaussLegendre::new(nodes);
    let h = 2.0 / k as f64;
    let cells = k.pow(d as u32);
    (0..cells)
        .into_par_iter()
        .map(|mut c| {
            let mut axes = Vec::with_capacity(d);
            for _ in 0..d {
                let b = c % k;
                c /= k;
                let a = -1.0 + b as f64 * h;
                axes.push(gl.composite(a, a + h, 1));
            }
            let mut total = 0.0;
            tensor_for_each(&axes, |x, w| total += w * density(x));
            total
        })
        .collect()
}

/// Kolmogorov–Smirnov distance between 1-D samples and a CDF.
pub fn ks_distance<F: Fn(f64) -> f64>(values: &[f64], cdf: F) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum W1Method {
    Exact1d,
    Sliced,
    SmallNAssignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W1Estimate {
    pub value: f64,
    pub method: W1Method,
    /// Projections (sliced) or sample count.
    pub resolution: usize,
    pub error_estimate: f64,
}

/// Exact one-dimensional W1 between empirical laws: mean absolute
/// difference of sorted samples for equal sizes, `∫ |F_a − F_b|` otherwise.
pub fn w1_1d_exact(a: &[f64], b: &[f64]) -> Result<W1Estimate> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("W1 needs nonempty samples".into()));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let value = if x.len() == y.len() {
        x.iter().zip(&y).map(|(u, v)| (u - v).abs()).sum::<f64>() / x.len() as f64
    } else {
        cdf_gap(&x, &y)
    };
    Ok(W1Estimate {
        value,
        method: W1Method::Exact1d,
        resolution: a.len().min(b.len()),
        error_estimate: 0.0,
    })
}

fn cdf_gap(x: &[f64], y: &[f64]) -> f64 {
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = x[0].min(y[0]);
    let mut total = 0.0;
    while i < x.len() || j < y.len() {
        let next = match (x.get(i), y.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / nx - j as f64 / ny).abs() * (next - prev);
        while i < x.len() && x[i] <= next {
            i += 1;
        }
        while j < y.len() && y[j] <= next {
            j += 1;
        }
        prev = next;
    }
    total
}

/// Sliced W1: mean of exact 1-D W1 over random unit directions, with the
/// standard error over projections. Never exceeds the true W1.
pub fn w1_sliced(a: &Samples, b: &Samples, n_projections: usize, seed: u64) -> Result<W1Estimate> {
    if a.dim() != b.dim() {
        return Err(Error::Shape("sample sets differ in dimension".into()));
    }
    if n_projections == 0 {
        return Err(Error::Domain("need at least one projection".into()));
    }
    let d = a.dim();
    let mut rng = stream(seed, 0);
    let dirs: Vec<Vec<f64>> = (0..n_projections)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let project = |s: &Samples, th: &[f64]| -> Vec<f64> {
        s.rows().map(|r| r.iter().zip(th).map(|(x, t)| x * t).sum()).collect()
    };
    let vals = dirs
        .par_iter()
        .map(|th| Ok(w1_1d_exact(&project(a, th), &project(b, th))?.value))
        .collect::<Result<Vec<f64>>>()?;
    let e = mean_with_se(&vals);
    Ok(W1Estimate {
        value: e.mean,
        method: W1Method::Sliced,
        resolution: n_projections,
        error_estimate: e.std_err,
    })
}

/// Exact W1 between equal-size point clouds (`n ≤ 8`) by enumerating all
/// permutation couplings, Euclidean ground cost.
pub fn w1_assignment(a: &Samples, b: &Samples) -> Result<W1Estimate> {
    let n = a.len();
    if n != b.len() || n == 0 || a.dim() != b.dim() {
        return Err(Error::Shape("assignment needs equal, nonempty sample sets".into()));
    }
    if n > 8 {
        return Err(Error::Unsupported(format!(
            "assignment is brute force, n <= 8 (got {n})"
        )));
    }
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    a.row(i)
                        .iter()
                        .zip(b.row(j))
                        .map(|(x, y)| (x - y).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm
    let mut c = vec![0usize; n];
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
    best = best.min(eval(&perm));
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(W1Estimate {
        value: best / n as f64,
        method: W1Method::SmallNAssignment,
        resolution: n,
        error_estimate: 0.0,
    })
}

/// Result of checking that `E‖s − ∇log p_t‖² − E‖s − ∇log p_{t|0}‖²` does
/// not depend on `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    /// Per candidate: the difference of the two expectations.
    pub constants: Vec<LossEstimate>,
    /// Largest `|c_i − c_j| / se(c_i − c_j)` over pairs (paired draws).
    pub max_pairwise_z: f64,
    /// The difference at `s = ∇ log p_t`, i.e. `−E‖∇log p_t − ∇log p_{t|0}‖²`.
    pub oracle_constant: LossEstimate,
}

/// Evaluates both expectations for each candidate on shared draws
/// `X₀ ~ p₀`, `X_t ~ p_{t|0}(·|X₀)`.
pub fn score_identity_check(
    candidates: &[&dyn ScoreFunction],
    oracle: &DiffusedOracle,
    t: f64,
    mc_n: usize,
    seed: u64,
) -> Result<IdentityReport> {
    if mc_n < 2 {
        return Err(Error::Domain("need at least two draws".into()));
    }
    let base = oracle.sample_base(mc_n, derive_seed(seed, 1))?;
    let d = base.dim();
    let schedule = oracle.schedule();
    let mut rng = stream(derive_seed(seed, 2), 0);
    let mut xt = Samples::with_capacity(d, mc_n);
    for r in base.rows() {
        xt.push_row(&schedule.forward_perturb(r, t, &mut rng)?);
    }
    let mut cond = Samples::with_capacity(d, mc_n);
    let mut true_s = Samples::with_capacity(d, mc_n);
    let mut buf = vec![0.0; d];
    for (x, x0) in xt.rows().zip(base.rows()) {
        schedule.conditional_score_into(x, x0, t, &mut buf)?;
        cond.push_row(&buf);
        oracle.score_into(x, t, &mut buf)?;
        true_s.push_row(&buf);
    }
    let per_draw = |s: &dyn ScoreFunction| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(mc_n);
        let mut v = vec![0.0; d];
        for k in 0..mc_n {
            s.score_into(xt.row(k), t, &mut v)?;
            let a: f64 = v.iter().zip(true_s.row(k)).map(|(u, w)| (u - w).powi(2)).sum();
            let b: f64 = v.iter().zip(cond.row(k)).map(|(u, w)| (u - w).powi(2)).sum();
            out.push(a - b);
        }
        Ok(out)
    };
    let diffs: Vec<Vec<f64>> = candidates.iter().map(|s| per_draw(*s)).collect::<Result<_>>()?;
    let constants: Vec<LossEstimate> = diffs.iter().map(|v| mean_with_se(v)).collect();
    let mut max_z: f64 = 0.0;
    for i in 0..diffs.len() {
        for j in i + 1..diffs.len() {
            let paired: Vec<f64> = diffs[i].iter().zip(&diffs[j]).map(|(a, b)| a - b).collect();
            let e = mean_with_se(&paired);
            let z = if e.std_err > 0.0 {
                e.mean.abs() / e.std_err
            } else if e.mean == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            max_z = max_z.max(z);
        }
    }
    let oracle_diffs: Vec<f64> = (0..mc_n)
        .map(|k| {
            -true_s
                .row(k)
                .iter()
                .zip(cond.row(k))
                .map(|(u, w)| (u - w).powi(2))
                .sum::<f64>()
        })
        .collect();
    Ok(IdentityReport {
        constants,
        max_pairwise_z: max_z,
        oracle_constant: mean_with_se(&oracle_diffs),
    })
}
