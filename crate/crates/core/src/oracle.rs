//! Ground-truth diffused densities `p_t = ∫ N(· ; m_t y, σ_t² I) p₀(y) dy`
//! and their scores.
//!
//! Interaction densities factor over the connected components of their
//! clique graph, so `p_t` is a product of per-block convolutions. Blocks
//! without a component are uniform and use the closed form
//! `∫_{-1}^{1} N(x; m y, σ²) dy = [Φ((x+m)/σ) − Φ((x−m)/σ)] / m`; other
//! blocks (at most three coordinates) use tensor Gauss–Legendre quadrature
//! on a window around the posterior mass.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::density::InteractionDensity;
use crate::error::{Error, Result};
use crate::quad::{
    adaptive_integrate, inverse_mills, log_normal_sf, normal_cdf, normal_sf, tensor_for_each, GaussLegendre,
};
use crate::rng::{derive_seed, stream};
use crate::samples::Samples;
use crate::schedule::Schedule;
use crate::score::ScoreFunction;

/// Evaluation floor for `p_t`; scores are refused below it.
pub const DENSITY_FLOOR: f64 = 1e-280;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal Gaussian mixture, used as an auxiliary family with a closed-form score.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != vars.len() {
            return Err(Error::Shape(
                "mixture needs matching weights, means and variances".into(),
            ));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().chain(&vars).any(|v| v.len() != dim) {
            return Err(Error::Shape("mixture components must share one dimension".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0)) || vars.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::Domain("weights and variances must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        Ok(Self {
            dim,
            weights: weights.iter().map(|w| w / total).collect(),
            means,
            vars,
        })
    }

    /// Standard normal `N(0, I_d)`.
    pub fn standard(dim: usize) -> Self {
        Self {
            dim,
            weights: vec![1.0],
            means: vec![vec![0.0; dim]],
            vars: vec![vec![1.0; dim]],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Log-density and score of the mixture after scaling means by `m` and
    /// adding `s2` to every variance.
    fn log_density_score(&self, x: &[f64], m: f64, s2: f64, out: Option<&mut [f64]>) -> f64 {
        let logs: Vec<f64> = (0..self.weights.len())
            .map(|k| {
                self.weights[k].ln()
                    + x.iter()
                        .zip(&self.means[k])
                        .zip(&self.vars[k])
                        .map(|((xi, mu), v)| {
                            let var = m * m * v + s2;
                            -0.5 * (xi - m * mu).powi(2) / var - 0.5 * var.ln() - LN_SQRT_2PI
                        })
                        .sum::<f64>()
            })
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logs.iter().map(|l| (l - top).exp()).sum();
        if let Some(out) = out {
            out.fill(0.0);
            for (k, l) in logs.iter().enumerate() {
                let r = (l - top).exp() / total;
                for (i, o) in out.iter_mut().enumerate() {
                    let var = m * m * self.vars[k][i] + s2;
                    *o -= r * (x[i] - m * self.means[k][i]) / var;
                }
            }
        }
        top + total.ln()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Samples {
        let mut rng = stream(seed, 0);
        let mut out = Samples::with_capacity(self.dim, n);
        let mut row = vec![0.0; self.dim];
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut k = 0;
            let mut acc = self.weights[0];
            while u > acc && k + 1 < self.weights.len() {
                k += 1;
                acc += self.weights[k];
            }
            for (i, r) in row.iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *r = self.means[k][i] + self.vars[k][i].sqrt() * z;
            }
            out.push_row(&row);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMethod {
    ClosedFormUniform,
    ClosedFormGaussianMixture,
    Quadrature,
}

#[derive(Debug, Clone)]
enum Base {
    Interaction(InteractionDensity),
    Mixture(GaussianMixture),
}

/// Coordinates coupled through cliques, with the components acting on them
/// (clique indices rewritten to block-local positions).
#[derive(Debug, Clone)]
struct Block {
    coords: Vec<usize>,
    factors: Vec<(Vec<usize>, usize)>,
}

/// Oracle value with an error estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleEval {
    pub log_density: f64,
    pub score: Vec<f64>,
    /// Estimated absolute error of the score (max over coordinates).
    pub score_error: f64,
    /// Estimated relative error of the density.
    pub density_error: f64,
}

#[derive(Debug, Clone)]
pub struct DiffusedOracle {
    base: Base,
    schedule: Schedule,
    method: OracleMethod,
    blocks: Vec<Block>,
    fine: GaussLegendre,
    coarse: GaussLegendre,
}

impl DiffusedOracle {
    /// Oracle for an interaction density. Uses the closed form when the
    /// density is uniform, otherwise blockwise quadrature (blocks of at most
    /// three coupled coordinates) with 64 nodes per axis.
    pub fn new(density: InteractionDensity, schedule: Schedule) -> Result<Self> {
        let blocks = blocks_of(&density);
        if let Some(b) = blocks.iter().find(|b| b.coords.len() > 3) {
            return Err(Error::Unsupported(format!(
                "quadrature oracle supports coupled blocks of at most 3 coordinates, got {}",
                b.coords.len()
            )));
        }
        let method = if blocks.iter().all(|b| b.factors.is_empty()) {
            OracleMethod::ClosedFormUniform
        } else {
            OracleMethod::Quadrature
        };
        Ok(Self {
            base: Base::Interaction(density),
            schedule,
            method,
            blocks,
            fine: GaussLegendre::new(64),
            coarse: GaussLegendre::new(32),
        })
    }

    pub fn gaussian_mixture(mixture: GaussianMixture, schedule: Schedule) -> Self {
        Self {
            base: Base::Mixture(mixture),
            schedule,
            method: OracleMethod::ClosedFormGaussianMixture,
            blocks: Vec::new(),
            fine: GaussLegendre::new(64),
            coarse: GaussLegendre::new(32),
        }
    }

    /// Sets the Gauss–Legendre node count per axis; the error estimate
    /// compares against half as many nodes.
    pub fn with_nodes(mut self, nodes: usize) -> Self {
        let nodes = nodes.max(4);
        self.fine = GaussLegendre::new(nodes);
        self.coarse = GaussLegendre::new(nodes / 2);
        self
    }

    pub fn method(&self) -> OracleMethod {
        self.method
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        match &self.base {
            Base::Interaction(d) => d.dim(),
            Base::Mixture(m) => m.dim(),
        }
    }

    pub fn interaction_density(&self) -> Option<&InteractionDensity> {
        match &self.base {
            Base::Interaction(d) => Some(d),
            Base::Mixture(_) => None,
        }
    }

    /// Fresh draws from `p₀`.
    pub fn sample_base(&self, n: usize, seed: u64) -> Result<Samples> {
        match &self.base {
            Base::Interaction(d) => d.sample(n, seed),
            Base::Mixture(m) => Ok(m.sample(n, seed)),
        }
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("expected a point of dimension {}", self.dim())));
        }
        Ok(())
    }

    /// `log p_t(x)`; `-inf` where the density vanishes (outside the cube at `t = 0`).
    pub fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        self.check_point(x)?;
        let (m, sigma) = self.schedule.m_sigma(t)?;
        if sigma == 0.0 {
            return Ok(match &self.base {
                Base::Interaction(d) if d.contains(x) => d.log_density(x)?,
                Base::Interaction(_) => f64::NEG_INFINITY,
                Base::Mixture(g) => g.log_density_score(x, 1.0, 0.0, None),
            });
        }
        self.eval_inner(x, m, sigma, &self.fine, None)
    }

    pub fn density(&self, x: &[f64], t: f64) -> Result<f64> {
        Ok(self.log_density(x, t)?.exp())
    }

    /// Score together with error estimates (quadrature at full and half
    /// node counts; closed forms report rounding-level errors).
    pub fn eval(&self, x: &[f64], t: f64) -> Result<OracleEval> {
        self.check_point(x)?;
        let (m, sigma) = self.positive_time(t)?;
        let mut score = vec![0.0; self.dim()];
        let log_density = self.eval_inner(x, m, sigma, &self.fine, Some(&mut score))?;
        self.check_floor(log_density)?;
        let (score_error, density_error) = if self.method == OracleMethod::Quadrature {
            let mut coarse = vec![0.0; self.dim()];
            let lc = self.eval_inner(x, m, sigma, &self.coarse, Some(&mut coarse))?;
            let se = score
                .iter()
                .zip(&coarse)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            (se, (log_density - lc).abs())
        } else {
            let mag = score.iter().map(|v| v.abs()).fold(0.0, f64::max);
            (64.0 * f64::EPSILON * (1.0 + mag), 64.0 * f64::EPSILON)
        };
        Ok(OracleEval {
            log_density,
            score,
            score_error,
            density_error,
        })
    }

    fn positive_time(&self, t: f64) -> Result<(f64, f64)> {
        let (m, sigma) = self.schedule.m_sigma(t)?;
        if sigma == 0.0 {
            return Err(Error::Singularity("the diffused score is not defined at t = 0".into()));
        }
        Ok((m, sigma))
    }

    fn check_floor(&self, log_density: f64) -> Result<()> {
        if !(log_density >= DENSITY_FLOOR.ln()) {
            return Err(Error::Region {
                density: log_density.exp(),
                floor: DENSITY_FLOOR,
            });
        }
        Ok(())
    }

    fn eval_inner(
        &self,
        x: &[f64],
        m: f64,
        sigma: f64,
        rule: &GaussLegendre,
        mut score: Option<&mut [f64]>,
    ) -> Result<f64> {
        let density = match &self.base {
            Base::Mixture(g) => return Ok(g.log_density_score(x, m, sigma * sigma, score)),
            Base::Interaction(d) => d,
        };
        let mut total = -density.log_z();
        for block in &self.blocks {
            if block.factors.is_empty() {
                for &i in &block.coords {
                    let (l, s) = uniform_coordinate(x[i], m, sigma);
                    total += l;
                    if let Some(out) = score.as_deref_mut() {
                        out[i] = s;
                    }
                }
                continue;
            }
            let (l, s) = self.block_quadrature(density, block, x, m, sigma, rule)?;
            total += l;
            if let Some(out) = score.as_deref_mut() {
                for (k, &i) in block.coords.iter().enumerate() {
                    out[i] = s[k];
                }
            }
        }
        Ok(total)
    }

    /// `log ∫ exp(Σ f_J(y)) Π N(x_i; m y_i, σ²) dy` over the block and the
    /// block's score.
    fn block_quadrature(
        &self,
        density: &InteractionDensity,
        block: &Block,
        x: &[f64],
        m: f64,
        sigma: f64,
        rule: &GaussLegendre,
    ) -> Result<(f64, Vec<f64>)> {
        let b = block.coords.len();
        let s2 = sigma * sigma;
        let comps = density.components();
        let shift: f64 = block.factors.iter().map(|(_, c)| comps[*c].sup_bound()).sum();
        // Per axis, keep the y-range where the Gaussian factor is within e^{-40}
        // of its maximum over the cube and factor that maximum out.
        let mut axes = Vec::with_capacity(b);
        let mut log_peak = 0.0;
        for &i in &block.coords {
            let xi = x[i];
            let ystar = (xi / m).clamp(-1.0, 1.0);
            let dmin = xi - m * ystar;
            let r = (dmin * dmin + 80.0 * s2).sqrt();
            let lo = ((xi - r) / m).max(-1.0);
            let hi = ((xi + r) / m).min(1.0);
            log_peak -= dmin * dmin / (2.0 * s2);
            axes.push(rule.composite(lo, hi, 1));
        }
        let mut acc = 0.0;
        let mut first = vec![0.0; b];
        let mut buf = [0.0f64; 8];
        tensor_for_each(&axes, |y, w| {
            let mut logf = -shift;
            for (local, c) in &block.factors {
                let u = &mut buf[..local.len()];
                for (slot, &k) in u.iter_mut().zip(local) {
                    *slot = y[k];
                }
                logf += comps[*c].eval(u);
            }
            let mut logk = 0.0;
            for (k, &i) in block.coords.iter().enumerate() {
                let dx = x[i] - m * y[k];
                logk -= dx * dx / (2.0 * s2);
            }
            let v = w * (logf + logk - log_peak).exp();
            acc += v;
            for (f, yk) in first.iter_mut().zip(y) {
                *f += v * yk;
            }
        });
        if !(acc > 0.0) || !acc.is_finite() {
            return Err(Error::Region {
                density: 0.0,
                floor: DENSITY_FLOOR,
            });
        }
        let log_i = acc.ln() + log_peak + shift - b as f64 * (sigma.ln() + LN_SQRT_2PI);
        let score = block
            .coords
            .iter()
            .zip(&first)
            .map(|(&i, f)| (m * f / acc - x[i]) / s2)
            .collect();
        Ok((log_i, score))
    }

    /// CDF of `p_t` for one-dimensional densities.
    pub fn cdf_1d(&self, x: f64, t: f64) -> Result<f64> {
        if self.dim() != 1 {
            return Err(Error::Unsupported("cdf_1d needs a one-dimensional density".into()));
        }
        let (m, sigma) = self.schedule.m_sigma(t)?;
        match &self.base {
            Base::Mixture(g) => Ok(g
                .weights
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let sd = (m * m * g.vars[k][0] + sigma * sigma).sqrt();
                    w * normal_cdf((x - m * g.means[k][0]) / sd)
                })
                .sum()),
            Base::Interaction(d) => {
                if sigma == 0.0 {
                    let hi = x.clamp(-1.0, 1.0);
                    if hi <= -1.0 {
                        return Ok(0.0);
                    }
                    let f = |y: f64| d.density(&[y]);
                    return adaptive_integrate(&f, -1.0, hi, 1e-12, 1e-15, 40);
                }
                if self.method == OracleMethod::ClosedFormUniform {
                    return Ok(uniform_cdf(x, m, sigma));
                }
                // E_{y ~ p₀}[Φ((x - m y) / σ)], split where Φ changes fastest.
                let f = |y: f64| d.density(&[y]) * normal_cdf((x - m * y) / sigma);
                let mut cuts = vec![-1.0];
                for c in [(x - 10.0 * sigma) / m, (x + 10.0 * sigma) / m] {
                    if c > -1.0 && c < 1.0 {
                        cuts.push(c);
                    }
                }
                cuts.push(1.0);
                let mut total = 0.0;
                for w in cuts.windows(2) {
                    total += adaptive_integrate(&f, w[0], w[1], 1e-12, 1e-15, 40)?;
                }
                Ok(total.clamp(0.0, 1.0))
            }
        }
    }
}

impl ScoreFunction for DiffusedOracle {
    fn dim(&self) -> usize {
        DiffusedOracle::dim(self)
    }

    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.check_point(x)?;
        let (m, sigma) = self.positive_time(t)?;
        let l = self.eval_inner(x, m, sigma, &self.fine, Some(out))?;
        self.check_floor(l)
    }
}

fn blocks_of(density: &InteractionDensity) -> Vec<Block> {
    let d = density.dim();
    let mut parent: Vec<usize> = (0..d).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        let mut i = i;
        while p[i] != r {
            let next = p[i];
            p[i] = r;
            i = next;
        }
        r
    }
    let cliques = density.cliques().cliques();
    for (j, c) in cliques.iter().zip(density.components()) {
        if c.terms().is_empty() {
            continue;
        }
        for w in j.windows(2) {
            let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            parent[a] = b;
        }
    }
    let mut blocks: Vec<Block> = Vec::new();
    let mut root_to_block = vec![usize::MAX; d];
    for i in 0..d {
        let r = find(&mut parent, i);
        if root_to_block[r] == usize::MAX {
            root_to_block[r] = blocks.len();
            blocks.push(Block {
                coords: Vec::new(),
                factors: Vec::new(),
            });
        }
        blocks[root_to_block[r]].coords.push(i);
    }
    for (ci, (j, c)) in cliques.iter().zip(density.components()).enumerate() {
        if c.terms().is_empty() {
            continue;
        }
        let block = &mut blocks[root_to_block[find(&mut parent, j[0])]];
        let local = j
            .iter()
            .map(|i| block.coords.iter().position(|c| c == i).expect("coordinate in block"))
            .collect();
        block.factors.push((local, ci));
    }
    blocks
}

/// `log Φ(a) − Φ(b)` for `a > b`, without cancellation.
fn log_phi_diff(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        let (la, lb) = (log_normal_sf(a), log_normal_sf(b));
        lb + (-(la - lb).exp_m1()).ln()
    } else if a <= 0.0 {
        log_phi_diff(-b, -a)
    } else {
        (1.0 - normal_sf(a) - normal_sf(-b)).ln()
    }
}

/// Log-density factor and score of one uniform coordinate.
fn uniform_coordinate(x: f64, m: f64, sigma: f64) -> (f64, f64) {
    let a = (x + m) / sigma;
    let b = (x - m) / sigma;
    let log_i = log_phi_diff(a, b) - m.ln();
    (log_i, uniform_score(a, b, sigma))
}

/// `[φ(a) − φ(b)] / (σ [Φ(a) − Φ(b)])` for `a > b`.
fn uniform_score(a: f64, b: f64, sigma: f64) -> f64 {
    if b >= 0.0 {
        let delta = log_normal_sf(a) - log_normal_sf(b);
        let (ra, rb) = (inverse_mills(a), inverse_mills(b));
        (ra * delta.exp() - rb) / (sigma * -delta.exp_m1())
    } else if a <= 0.0 {
        -uniform_score(-b, -a, sigma)
    } else {
        let num = crate::quad::normal_pdf(a) - crate::quad::normal_pdf(b);
        num / (sigma * (1.0 - normal_sf(a) - normal_sf(-b)))
    }
}

/// CDF of the diffused uniform law via `∫ Φ = u Φ(u) + φ(u)`.
fn uniform_cdf(x: f64, m: f64, sigma: f64) -> f64 {
    let g = |u: f64| {
        if u < -40.0 {
            0.0
        } else {
            u * normal_cdf(u) + crate::quad::normal_pdf(u)
        }
    };
    let a = (x + m) / sigma;
    let b = (x - m) / sigma;
    (sigma / (2.0 * m) * (g(a) - g(b))).clamp(0.0, 1.0)
}

/// Root-integrated squared score error with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2Estimate {
    pub value: f64,
    pub std_err: f64,
    pub mean_sq: f64,
    pub mean_sq_se: f64,
}

impl L2Estimate {
    fn from_squares(sq: &[f64]) -> Self {
        let n = sq.len() as f64;
        let mean = sq.iter().sum::<f64>() / n;
        let var = if sq.len() > 1 {
            sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let se = (var / n).sqrt();
        let value = mean.sqrt();
        Self {
            value,
            std_err: if value > 0.0 { se / (2.0 * value) } else { 0.0 },
            mean_sq: mean,
            mean_sq_se: se,
        }
    }
}

/// `[∫ ‖s(x,t) − s_t(x)‖² p_t(x) dx]^{1/2}` by Monte Carlo, with `x` drawn by
/// perturbing fresh draws from `p₀`.
pub fn score_l2_error<S: ScoreFunction + ?Sized>(
    candidate: &S,
    oracle: &DiffusedOracle,
    t: f64,
    mc_n: usize,
    seed: u64,
) -> Result<L2Estimate> {
    let points = diffused_draws(oracle, t, mc_n, seed)?;
    score_l2_error_at(candidate, oracle, &points, t)
}

/// As [`score_l2_error`] on caller-supplied draws from `p_t`.
pub fn score_l2_error_at<S: ScoreFunction + ?Sized>(
    candidate: &S,
    oracle: &DiffusedOracle,
    points: &Samples,
    t: f64,
) -> Result<L2Estimate> {
    if points.is_empty() {
        return Err(Error::Domain("need at least one evaluation point".into()));
    }
    let d = points.dim();
    let sq: Vec<f64> = points
        .as_slice()
        .par_chunks(d * 256)
        .map(|chunk| -> Result<Vec<f64>> {
            let mut a = vec![0.0; d];
            let mut b = vec![0.0; d];
            chunk
                .chunks_exact(d)
                .map(|x| {
                    candidate.score_into(x, t, &mut a)?;
                    oracle.score_into(x, t, &mut b)?;
                    Ok(a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum())
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    Ok(L2Estimate::from_squares(&sq))
}

/// `mc_n` draws from `p_t`: base samples pushed through the forward kernel.
pub fn diffused_draws(oracle: &DiffusedOracle, t: f64, mc_n: usize, seed: u64) -> Result<Samples> {
    let base = oracle.sample_base(mc_n, derive_seed(seed, 1))?;
    let mut rng = stream(derive_seed(seed, 2), 0);
    let mut out = Samples::with_capacity(base.dim(), mc_n);
    for row in base.rows() {
        out.push_row(&oracle.schedule().forward_perturb(row, t, &mut rng)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{CliqueSet, CosineTerm, QuadSpec, SmoothComponent};

    fn uniform_oracle() -> DiffusedOracle {
        DiffusedOracle::new(InteractionDensity::uniform(1).unwrap(), Schedule::constant(1.0)).unwrap()
    }

    #[test]
    fn uniform_density_matches_numerical_convolution() {
        let o = uniform_oracle();
        assert_eq!(o.method(), OracleMethod::ClosedFormUniform);
        for t in [0.01, 0.2, 1.0] {
            let (m, s) = Schedule::constant(1.0).m_sigma(t).unwrap();
            for x in [-1.3, -0.5, 0.0, 0.7, 1.1] {
                let f = |y: f64| {
                    0.5 * (-(x - m * y).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
                };
                let c = [
                    -1.0,
                    ((x - 10.0 * s) / m).clamp(-1.0, 1.0),
                    ((x + 10.0 * s) / m).clamp(-1.0, 1.0),
                    1.0,
                ];
                let mut want = 0.0;
                for w in c.windows(2) {
                    if w[1] > w[0] {
                        want += adaptive_integrate(&f, w[0], w[1], 1e-13, 1e-300, 40).unwrap();
                    }
                }
                let got = o.density(&[x], t).unwrap();
                assert!(
                    (got - want).abs() <= 1e-8 * want.max(1e-300),
                    "t={t} x={x}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn uniform_score_matches_finite_difference() {
        let o = uniform_oracle();
        for t in [0.005, 0.1, 0.8] {
            for x in [-1.05, -0.6, 0.0, 0.3, 0.99] {
                let h = 1e-6;
                let fd = (o.log_density(&[x + h], t).unwrap() - o.log_density(&[x - h], t).unwrap()) / (2.0 * h);
                let s = o.score(&[x], t).unwrap()[0];
                assert!((fd - s).abs() <= 1e-5 * s.abs().max(1.0), "t={t} x={x}: {fd} vs {s}");
            }
        }
        assert_eq!(o.score(&[0.0], 0.3).unwrap()[0], 0.0);
    }

    #[test]
    fn uniform_tails_are_stable() {
        let o = uniform_oracle();
        let t = 1e-4;
        let (m, s) = Schedule::constant(1.0).m_sigma(t).unwrap();
        // far outside: the score approaches the Gaussian tail slope -(x - m)/σ²
        let x = m + 20.0 * s;
        let sc = o.score(&[x], t).unwrap()[0];
        let slope = -(x - m) / (s * s);
        assert!(((sc - slope) / slope).abs() < 0.01);
        let sc2 = o.score(&[-x], t).unwrap()[0];
        assert!((sc + sc2).abs() < 1e-9 * sc.abs());
        assert!(matches!(o.score(&[5.0], t), Err(Error::Region { .. })));
    }

    #[test]
    fn large_t_approaches_standard_normal() {
        let o = uniform_oracle();
        let t = 7.5; // m = e^{-7.5} < 1e-3
        let mut gap: f64 = 0.0;
        for k in -40..=40 {
            let x = k as f64 / 10.0;
            gap = gap.max((o.density(&[x], t).unwrap() - crate::quad::normal_pdf(x)).abs());
        }
        assert!(gap < 1e-3);
    }

    #[test]
    fn symmetric_density_gives_symmetric_p_t() {
        // cos(π k (x+1)/2) is even in x for even k
        let comp = SmoothComponent::new(
            1,
            vec![CosineTerm {
                freq: vec![2],
                coef: 0.7,
            }],
            1.0,
            10.0,
        )
        .unwrap();
        let d = InteractionDensity::normalize(
            CliqueSet::new(1, 1, vec![vec![0]]).unwrap(),
            vec![comp],
            QuadSpec::auto(1),
        )
        .unwrap();
        let o = DiffusedOracle::new(d, Schedule::constant(1.0)).unwrap();
        for x in [0.1, 0.5, 0.9, 1.2] {
            let a = o.density(&[x], 0.05).unwrap();
            let b = o.density(&[-x], 0.05).unwrap();
            assert!((a - b).abs() < 1e-12 * a);
        }
    }

    fn coupled_2d() -> InteractionDensity {
        let comp = SmoothComponent::new(
            2,
            vec![
                CosineTerm {
                    freq: vec![1, 1],
                    coef: 0.5,
                },
                CosineTerm {
                    freq: vec![1, 0],
                    coef: -0.3,
                },
            ],
            1.0,
            10.0,
        )
        .unwrap();
        InteractionDensity::normalize(
            CliqueSet::new(2, 2, vec![vec![0, 1]]).unwrap(),
            vec![comp],
            QuadSpec::auto(2),
        )
        .unwrap()
    }

    #[test]
    fn quadrature_score_consistent_with_log_density() {
        let o = DiffusedOracle::new(coupled_2d(), Schedule::constant(1.0)).unwrap();
        assert_eq!(o.method(), OracleMethod::Quadrature);
        for t in [0.01, 0.1, 0.5] {
            for x in [[0.2, -0.4], [0.8, 0.9], [-1.02, 0.1]] {
                let e = o.eval(&x, t).unwrap();
                for k in 0..2 {
                    let h = 1e-5;
                    let mut xp = x;
                    let mut xm = x;
                    xp[k] += h;
                    xm[k] -= h;
                    let fd = (o.log_density(&xp, t).unwrap() - o.log_density(&xm, t).unwrap()) / (2.0 * h);
                    assert!(
                        (fd - e.score[k]).abs() <= 1e-4 * e.score[k].abs().max(1.0),
                        "{fd} vs {}",
                        e.score[k]
                    );
                }
                assert!(e.score_error < 1e-6, "{}", e.score_error);
            }
        }
    }

    #[test]
    fn quadrature_density_integrates_to_one() {
        let o = DiffusedOracle::new(coupled_2d(), Schedule::constant(1.0))
            .unwrap()
            .with_nodes(32);
        let gl = GaussLegendre::new(12);
        let axis = gl.composite(-5.0, 5.0, 8);
        for t in [0.05, 0.5] {
            let mut total = 0.0;
            tensor_for_each(&[axis.clone(), axis.clone()], |x, w| {
                total += w * o.density(x, t).unwrap()
            });
            assert!((0.999..=1.001).contains(&total), "{total}");
        }
    }

    #[test]
    fn heat_flow_matches_fokker_planck() {
        let o = uniform_oracle();
        let t = 0.2;
        let (ht, hx) = (1e-5, 1e-4);
        let p = |x: f64, t: f64| o.density(&[x], t).unwrap();
        for x in [-0.8, -0.3, 0.0, 0.4, 0.9] {
            let dt = (p(x, t + ht) - p(x, t - ht)) / (2.0 * ht);
            let dxp = ((x + hx) * p(x + hx, t) - (x - hx) * p(x - hx, t)) / (2.0 * hx);
            let dxx = (p(x + hx, t) - 2.0 * p(x, t) + p(x - hx, t)) / (hx * hx);
            let rhs = dxp + dxx;
            assert!((dt - rhs).abs() <= 1e-2 * rhs.abs().max(1e-3), "x={x}: {dt} vs {rhs}");
        }
    }

    #[test]
    fn mixture_score_matches_quadrature() {
        let mix = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![vec![-0.5], vec![0.6]],
            vec![vec![0.04], vec![0.09]],
        )
        .unwrap();
        let o = DiffusedOracle::gaussian_mixture(mix.clone(), Schedule::constant(1.0));
        let t = 0.1;
        let (m, s) = Schedule::constant(1.0).m_sigma(t).unwrap();
        for x in [-0.9, -0.2, 0.4, 1.3] {
            // independent oracle: ∫ p₀(y) N(x; m y, σ²) dy and its x-derivative
            let p0 = |y: f64| {
                mix.weights
                    .iter()
                    .zip(&mix.means)
                    .zip(&mix.vars)
                    .map(|((w, mu), v)| {
                        w * (-(y - mu[0]).powi(2) / (2.0 * v[0])).exp() / (2.0 * std::f64::consts::PI * v[0]).sqrt()
                    })
                    .sum::<f64>()
            };
            let k = |y: f64| (-(x - m * y).powi(2) / (2.0 * s * s)).exp();
            let num = adaptive_integrate(&|y| p0(y) * k(y) * (m * y - x) / (s * s), -4.0, 4.0, 1e-13, 0.0, 40).unwrap();
            let den = adaptive_integrate(&|y| p0(y) * k(y), -4.0, 4.0, 1e-13, 0.0, 40).unwrap();
            let s_or = o.score(&[x], t).unwrap()[0];
            assert!((num / den - s_or).abs() < 1e-6, "{} vs {s_or}", num / den);
        }
    }

    #[test]
    fn standard_normal_is_stationary() {
        let o = DiffusedOracle::gaussian_mixture(GaussianMixture::standard(2), Schedule::constant(1.0));
        let s = o.score(&[0.3, -1.2], 0.7).unwrap();
        assert!((s[0] + 0.3).abs() < 1e-14 && (s[1] - 1.2).abs() < 1e-14);
    }

    #[test]
    fn uniform_cdf_matches_integrated_density() {
        let o = uniform_oracle();
        let t = 0.05;
        for x in [-1.2, -0.4, 0.0, 0.95, 1.3] {
            let want = adaptive_integrate(&|u| o.density(&[u], t).unwrap(), -4.0, x, 1e-12, 1e-14, 40).unwrap();
            assert!((o.cdf_1d(x, t).unwrap() - want).abs() < 1e-9);
        }
        // quadrature route agrees with the closed form
        let comp = SmoothComponent::new(
            1,
            vec![CosineTerm {
                freq: vec![1],
                coef: 0.4,
            }],
            1.0,
            10.0,
        )
        .unwrap();
        let d = InteractionDensity::normalize(
            CliqueSet::new(1, 1, vec![vec![0]]).unwrap(),
            vec![comp],
            QuadSpec::auto(1),
        )
        .unwrap();
        let q = DiffusedOracle::new(d, Schedule::constant(1.0)).unwrap();
        for x in [-0.5, 0.3] {
            let want = adaptive_integrate(&|u| q.density(&[u], t).unwrap(), -4.0, x, 1e-12, 1e-14, 40).unwrap();
            assert!((q.cdf_1d(x, t).unwrap() - want).abs() < 1e-8);
        }
    }

    #[test]
    fn l2_error_identity_and_shift() {
        let o = uniform_oracle();
        let t = 0.3;
        let pts = diffused_draws(&o, t, 2000, 5).unwrap();
        let e = score_l2_error_at(&o, &o, &pts, t).unwrap();
        assert!(e.value < 1e-6);
        let shifted = crate::score::FnScore::new(1, |x: &[f64], t: f64, out: &mut [f64]| {
            uniform_oracle().score_into(x, t, out).unwrap();
            out[0] += 0.25;
        });
        let e = score_l2_error_at(&shifted, &o, &pts, t).unwrap();
        assert!((e.value - 0.25).abs() < 1e-9);
    }

    #[test]
    fn l2_error_of_zero_score_matches_quadrature() {
        let o = uniform_oracle();
        let t = 0.3;
        let e = score_l2_error(&crate::score::ZeroScore(1), &o, t, 40_000, 9).unwrap();
        let f = |x: f64| {
            let s = o.score(&[x], t).unwrap()[0];
            s * s * o.density(&[x], t).unwrap()
        };
        let want = adaptive_integrate(&f, -4.0, 4.0, 1e-10, 1e-14, 40).unwrap().sqrt();
        assert!(
            (e.value - want).abs() < 3.0 * e.std_err,
            "{} vs {want} (se {})",
            e.value,
            e.std_err
        );
    }

    #[test]
    fn product_blocks_are_handled_independently() {
        let f = SmoothComponent::new(
            1,
            vec![CosineTerm {
                freq: vec![1],
                coef: 0.5,
            }],
            1.0,
            10.0,
        )
        .unwrap();
        let d3 = InteractionDensity::normalize(
            CliqueSet::new(3, 1, vec![vec![1]]).unwrap(),
            vec![f.clone()],
            QuadSpec::auto(3),
        )
        .unwrap();
        let d1 =
            InteractionDensity::normalize(CliqueSet::new(1, 1, vec![vec![0]]).unwrap(), vec![f], QuadSpec::auto(1))
                .unwrap();
        let o3 = DiffusedOracle::new(d3, Schedule::constant(1.0)).unwrap();
        let o1 = DiffusedOracle::new(d1, Schedule::constant(1.0)).unwrap();
        let u = uniform_oracle();
        let x = [0.2, -0.7, 0.5];
        let t = 0.1;
        let want =
            u.log_density(&[0.2], t).unwrap() + o1.log_density(&[-0.7], t).unwrap() + u.log_density(&[0.5], t).unwrap();
        assert!((o3.log_density(&x, t).unwrap() - want).abs() < 1e-10);
        let s = o3.score(&x, t).unwrap();
        assert!((s[1] - o1.score(&[-0.7], t).unwrap()[0]).abs() < 1e-10);
    }
}
