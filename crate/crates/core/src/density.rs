//! Exponential-interaction densities on the cube `[-1, 1]^d`:
//! `p(x) = exp(Σ_J f_J(x_J) - log Z)` with cliques `|J| ≤ d*`.
//!
//! Components are finite tensor-product cosine series
//! `f(u) = Σ_k a_k Π_i cos(π k_i (u_i + 1) / 2)`. For such a series every
//! order-`q` partial derivative of a single term is bounded by `|a|·‖ω‖^q`
//! and is `|a|·‖ω‖^{q+1}`-Lipschitz (`ω = π k / 2`), which gives the
//! certified Hölder constant `Σ_k 2^{1-s} |a_k| ‖ω_k‖^β` for `β = q + s`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quad::{tensor_for_each, GaussLegendre};
use crate::rng::stream;
use crate::samples::Samples;

/// Clique structure `S` of an interaction density; indices are 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CliqueSet {
    dim: usize,
    max_order: usize,
    cliques: Vec<Vec<usize>>,
}

impl CliqueSet {
    pub fn new(dim: usize, max_order: usize, cliques: Vec<Vec<usize>>) -> Result<Self> {
        if dim == 0 || max_order == 0 || max_order > dim {
            return Err(Error::Domain(format!(
                "need 1 <= max_order <= dim, got max_order={max_order}, dim={dim}"
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for j in &cliques {
            if j.is_empty() || j.len() > max_order {
                return Err(Error::Domain(format!(
                    "clique {j:?} must have between 1 and {max_order} indices"
                )));
            }
            if j.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Domain(format!(
                    "clique {j:?} must list strictly increasing indices"
                )));
            }
            if j.iter().any(|&i| i >= dim) {
                return Err(Error::Domain(format!("clique {j:?} has an index >= {dim}")));
            }
            if !seen.insert(j.clone()) {
                return Err(Error::Domain(format!("duplicate clique {j:?}")));
            }
        }
        Ok(Self {
            dim,
            max_order,
            cliques,
        })
    }

    /// All `max_order`-subsets of `0..dim` that are complete in the graph
    /// with the given undirected edges. With `max_order = 1` every vertex is
    /// its own clique.
    pub fn from_dependency_graph(dim: usize, max_order: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![vec![false; dim]; dim];
        for &(a, b) in edges {
            if a >= dim || b >= dim || a == b {
                return Err(Error::Domain(format!("invalid edge ({a}, {b})")));
            }
            adj[a][b] = true;
            adj[b][a] = true;
        }
        let mut cliques = Vec::new();
        let mut current = Vec::with_capacity(max_order);
        fn rec(
            start: usize,
            k: usize,
            dim: usize,
            adj: &[Vec<bool>],
            current: &mut Vec<usize>,
            out: &mut Vec<Vec<usize>>,
        ) {
            if current.len() == k {
                out.push(current.clone());
                return;
            }
            for v in start..dim {
                if current.iter().all(|&u| adj[u][v]) {
                    current.push(v);
                    rec(v + 1, k, dim, adj, current, out);
                    current.pop();
                }
            }
        }
        rec(0, max_order, dim, &adj, &mut current, &mut cliques);
        Self::new(dim, max_order, cliques)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn cliques(&self) -> &[Vec<usize>] {
        &self.cliques
    }

    pub fn len(&self) -> usize {
        self.cliques.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cliques.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineTerm {
    pub freq: Vec<u32>,
    pub coef: f64,
}

/// One smooth factor `f_J` as a cosine series with its Hölder certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothComponent {
    arity: usize,
    terms: Vec<CosineTerm>,
    holder_beta: f64,
    holder_c: f64,
}

impl SmoothComponent {
    /// Builds a component and checks that the series certificate is at most `holder_c`.
    pub fn new(arity: usize, terms: Vec<CosineTerm>, holder_beta: f64, holder_c: f64) -> Result<Self> {
        if arity == 0 {
            return Err(Error::Domain("component arity must be positive".into()));
        }
        if !(holder_beta > 0.0 && holder_c > 0.0) {
            return Err(Error::Domain("holder beta and C must be positive".into()));
        }
        for t in &terms {
            if t.freq.len() != arity {
                return Err(Error::Shape(format!(
                    "term frequency {:?} does not match arity {arity}",
                    t.freq
                )));
            }
            if !t.coef.is_finite() {
                return Err(Error::Numeric("non-finite coefficient".into()));
            }
        }
        let c = Self {
            arity,
            terms,
            holder_beta,
            holder_c,
        };
        let cert = c.certified_constant();
        if cert > holder_c * (1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "series certificate {cert} exceeds declared C = {holder_c}"
            )));
        }
        Ok(c)
    }

    /// Identically zero component.
    pub fn zero(arity: usize) -> Self {
        Self {
            arity,
            terms: Vec::new(),
            holder_beta: 1.0,
            holder_c: 1.0,
        }
    }

    /// Random series with coefficient decay `|k|^{-(β + arity/2 + 1)}`,
    /// rescaled so the certified constant equals `holder_c` (or less when
    /// that would push a coefficient above `holder_c |k|^{-(β + arity/2 + 1)}`).
    pub fn generate(arity: usize, holder_beta: f64, holder_c: f64, max_freq: u32, seed: u64) -> Result<Self> {
        if max_freq == 0 {
            return Err(Error::Domain("max_freq must be positive".into()));
        }
        let mut rng = stream(seed, 0xC05);
        let decay = holder_beta + arity as f64 / 2.0 + 1.0;
        let mut terms = Vec::new();
        let mut freq = vec![0u32; arity];
        loop {
            // odometer over {0..max_freq}^arity
            let mut k = 0;
            loop {
                if k == arity {
                    break;
                }
                freq[k] += 1;
                if freq[k] <= max_freq {
                    break;
                }
                freq[k] = 0;
                k += 1;
            }
            if k == arity {
                break;
            }
            let norm = freq.iter().map(|&f| (f as f64).powi(2)).sum::<f64>().sqrt();
            let mag: f64 = rng.random_range(0.5..1.0);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            terms.push(CosineTerm {
                freq: freq.clone(),
                coef: sign * mag * norm.powf(-decay),
            });
        }
        let mut c = Self {
            arity,
            terms,
            holder_beta,
            holder_c,
        };
        let raw = c.certified_constant();
        let scale = (holder_c / raw).min(holder_c);
        for t in &mut c.terms {
            t.coef *= scale;
        }
        Ok(c)
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn terms(&self) -> &[CosineTerm] {
        &self.terms
    }

    pub fn holder_beta(&self) -> f64 {
        self.holder_beta
    }

    pub fn holder_c(&self) -> f64 {
        self.holder_c
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.arity);
        self.terms
            .iter()
            .map(|t| {
                t.coef
                    * t.freq
                        .iter()
                        .zip(u)
                        .map(|(&k, &x)| (0.5 * PI * k as f64 * (x + 1.0)).cos())
                        .product::<f64>()
            })
            .sum()
    }

    /// `sup |f| ≤ Σ |a_k|`.
    pub fn sup_bound(&self) -> f64 {
        self.terms.iter().map(|t| t.coef.abs()).sum()
    }

    /// Hölder constant implied by the coefficients for this component's β.
    pub fn certified_constant(&self) -> f64 {
        let q = self.holder_beta.ceil() - 1.0;
        let s = self.holder_beta - q;
        self.terms
            .iter()
            .map(|t| {
                let w = t
                    .freq
                    .iter()
                    .map(|&k| (0.5 * PI * k as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                2f64.powf(1.0 - s) * t.coef.abs() * w.powf(self.holder_beta)
            })
            .sum()
    }

    fn merged_with(mut self, other: &SmoothComponent) -> SmoothComponent {
        self.terms.extend(other.terms.iter().cloned());
        self.holder_beta = self.holder_beta.min(other.holder_beta);
        self.holder_c += other.holder_c;
        self
    }

    fn permuted(&self, perm: &[usize]) -> SmoothComponent {
        let mut c = self.clone();
        for t in &mut c.terms {
            t.freq = perm.iter().map(|&p| t.freq[p]).collect();
        }
        c
    }
}

/// How to compute the normalization constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum QuadSpec {
    /// Nested composite Gauss–Legendre refinement until the relative change
    /// drops below `rel_tol`; supported for `d ≤ 4`.
    Tensor { rel_tol: f64, max_level: usize },
    /// Plain Monte Carlo; `quad_tol` records three relative standard errors.
    MonteCarlo { points: usize, seed: u64 },
}

impl QuadSpec {
    /// Tensor quadrature for `d ≤ 4`, otherwise 10⁶-point Monte Carlo.
    pub fn auto(dim: usize) -> Self {
        if dim <= 4 {
            QuadSpec::Tensor {
                rel_tol: 1e-6,
                max_level: 6,
            }
        } else {
            QuadSpec::MonteCarlo {
                points: 1_000_000,
                seed: 0,
            }
        }
    }
}

/// Normalized exponential-interaction density on `[-1, 1]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDensity {
    cliques: CliqueSet,
    components: Vec<SmoothComponent>,
    log_z: f64,
    quad_tol: f64,
    bounds: (f64, f64),
}

impl InteractionDensity {
    /// Normalizes `exp(Σ_J f_J)` over the cube.
    pub fn normalize(cliques: CliqueSet, components: Vec<SmoothComponent>, quad: QuadSpec) -> Result<Self> {
        if components.len() != cliques.len() {
            return Err(Error::Shape(format!(
                "{} cliques but {} components",
                cliques.len(),
                components.len()
            )));
        }
        for (j, c) in cliques.cliques().iter().zip(&components) {
            if j.len() != c.arity() {
                return Err(Error::Shape(format!(
                    "clique {j:?} has size {} but component arity {}",
                    j.len(),
                    c.arity()
                )));
            }
        }
        let mut density = Self {
            cliques,
            components,
            log_z: 0.0,
            quad_tol: 0.0,
            bounds: (0.0, 0.0),
        };
        let (log_z, tol) = density.compute_log_z(quad)?;
        density.set_normalization(log_z, tol);
        Ok(density)
    }

    /// Sums components attached to the same index set (after sorting each
    /// clique's indices) and normalizes.
    pub fn from_parts_merging(
        dim: usize,
        max_order: usize,
        parts: Vec<(Vec<usize>, SmoothComponent)>,
        quad: QuadSpec,
    ) -> Result<Self> {
        let mut merged: BTreeMap<Vec<usize>, SmoothComponent> = BTreeMap::new();
        for (idx, comp) in parts {
            if idx.len() != comp.arity() {
                return Err(Error::Shape(format!("clique {idx:?} vs arity {}", comp.arity())));
            }
            let mut perm: Vec<usize> = (0..idx.len()).collect();
            perm.sort_by_key(|&p| idx[p]);
            let sorted: Vec<usize> = perm.iter().map(|&p| idx[p]).collect();
            let comp = comp.permuted(&perm);
            match merged.remove(&sorted) {
                Some(prev) => {
                    merged.insert(sorted, prev.merged_with(&comp));
                }
                None => {
                    merged.insert(sorted, comp);
                }
            }
        }
        let (cl, comps): (Vec<_>, Vec<_>) = merged.into_iter().unzip();
        Self::normalize(CliqueSet::new(dim, max_order, cl)?, comps, quad)
    }

    /// Uniform density on `[-1, 1]^d`.
    pub fn uniform(dim: usize) -> Result<Self> {
        Self::normalize(
            CliqueSet::new(dim, 1, Vec::new())?,
            Vec::new(),
            QuadSpec::Tensor {
                rel_tol: 1e-6,
                max_level: 2,
            },
        )
    }

    /// Restores a density whose normalization was computed earlier.
    pub fn from_normalized_parts(
        cliques: CliqueSet,
        components: Vec<SmoothComponent>,
        log_z: f64,
        quad_tol: f64,
    ) -> Result<Self> {
        if components.len() != cliques.len() || !log_z.is_finite() {
            return Err(Error::Format("inconsistent normalized density".into()));
        }
        let mut d = Self {
            cliques,
            components,
            log_z,
            quad_tol,
            bounds: (0.0, 0.0),
        };
        d.set_normalization(log_z, quad_tol);
        Ok(d)
    }

    fn set_normalization(&mut self, log_z: f64, quad_tol: f64) {
        let sup: f64 = self.components.iter().map(|c| c.sup_bound()).sum();
        self.log_z = log_z;
        self.quad_tol = quad_tol;
        self.bounds = ((-sup - log_z).exp(), (sup - log_z).exp());
    }

    fn compute_log_z(&self, quad: QuadSpec) -> Result<(f64, f64)> {
        let d = self.dim();
        if self.components.iter().all(|c| c.terms().is_empty()) {
            return Ok((d as f64 * 2f64.ln(), 0.0));
        }
        // Subtract the sup bound before exponentiating to keep values O(1).
        let shift: f64 = self.components.iter().map(|c| c.sup_bound()).sum();
        let f = |x: &[f64]| (self.unnormalized_log(x) - shift).exp();
        match quad {
            QuadSpec::Tensor { rel_tol, max_level } => {
                if d > 4 {
                    return Err(Error::Unsupported(format!(
                        "tensor quadrature supports d <= 4, got {d}"
                    )));
                }
                let gl = GaussLegendre::new(8);
                let mut prev: Option<f64> = None;
                for level in 0..=max_level {
                    let panels = 1usize << level;
                    if (8 * panels).pow(d as u32) > 20_000_000 {
                        break;
                    }
                    let axis = gl.composite(-1.0, 1.0, panels);
                    let axes = vec![axis; d];
                    let mut z = 0.0;
                    tensor_for_each(&axes, |x, w| z += w * f(x));
                    if let Some(p) = prev {
                        let change = ((z - p) / z).abs();
                        if change < rel_tol {
                            return Ok((z.ln() + shift, change.max(f64::EPSILON)));
                        }
                    }
                    prev = Some(z);
                }
                Err(Error::Numeric(format!(
                    "normalization did not reach relative tolerance {rel_tol}"
                )))
            }
            QuadSpec::MonteCarlo { points, seed } => {
                if points < 2 {
                    return Err(Error::Domain("Monte Carlo needs at least 2 points".into()));
                }
                let mut rng = stream(seed, 0x2A);
                let mut x = vec![0.0; d];
                let (mut s1, mut s2) = (0.0, 0.0);
                for _ in 0..points {
                    for v in x.iter_mut() {
                        *v = rng.random_range(-1.0..=1.0);
                    }
                    let v = f(&x);
                    s1 += v;
                    s2 += v * v;
                }
                let n = points as f64;
                let mean = s1 / n;
                let se = ((s2 / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
                let vol = 2f64.powi(d as i32);
                Ok(((mean * vol).ln() + shift, 3.0 * se / mean))
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.cliques.dim()
    }

    pub fn cliques(&self) -> &CliqueSet {
        &self.cliques
    }

    pub fn components(&self) -> &[SmoothComponent] {
        &self.components
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    /// Relative accuracy of `exp(log_z)` reported by the normalization.
    pub fn quad_tol(&self) -> f64 {
        self.quad_tol
    }

    /// Certified `(lower, upper)` bounds on the density over the cube.
    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    /// Smallest `c₁ > 1` with `1/c₁ ≤ p ≤ c₁` implied by the bounds.
    pub fn c1(&self) -> f64 {
        self.bounds.1.max(1.0 / self.bounds.0)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    fn unnormalized_log(&self, x: &[f64]) -> f64 {
        let mut buf = [0.0f64; 8];
        let mut total = 0.0;
        for (j, c) in self.cliques.cliques().iter().zip(&self.components) {
            let u = &mut buf[..j.len()];
            for (slot, &i) in u.iter_mut().zip(j) {
                *slot = x[i];
            }
            total += c.eval(u);
        }
        total
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("expected a point of dimension {}", self.dim())));
        }
        if !self.contains(x) {
            return Err(Error::Domain(format!("point {x:?} lies outside [-1, 1]^d")));
        }
        Ok(self.unnormalized_log(x) - self.log_z)
    }

    /// Density value; zero outside the cube.
    pub fn density(&self, x: &[f64]) -> f64 {
        if !self.contains(x) {
            return 0.0;
        }
        (self.unnormalized_log(x) - self.log_z).exp()
    }

    /// Exact rejection sampling from the uniform proposal with envelope
    /// `upper bound × volume`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Samples> {
        if n == 0 {
            return Err(Error::Domain("sample count must be >= 1".into()));
        }
        const BLOCK: usize = 4096;
        let d = self.dim();
        let blocks = n.div_ceil(BLOCK);
        let upper = self.bounds.1;
        let parts: Vec<Vec<f64>> = (0..blocks)
            .into_par_iter()
            .map(|b| {
                let quota = BLOCK.min(n - b * BLOCK);
                let mut rng = stream(seed, b as u64);
                let mut out = Vec::with_capacity(quota * d);
                let mut x = vec![0.0; d];
                while out.len() < quota * d {
                    for v in x.iter_mut() {
                        *v = rng.random_range(-1.0..=1.0);
                    }
                    let u: f64 = rng.random();
                    if u * upper <= self.density(&x) {
                        out.extend_from_slice(&x);
                    }
                }
                out
            })
            .collect();
        let mut all = Vec::with_capacity(n * d);
        for p in parts {
            all.extend(p);
        }
        Samples::new(d, all)
    }

    /// Marginal density of `coord` on `grid`, integrating out the other
    /// coordinates by tensor Gauss–Legendre quadrature (`d ≤ 4`).
    pub fn marginal_1d(&self, coord: usize, grid: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if d > 4 {
            return Err(Error::Unsupported(format!("marginal_1d supports d <= 4, got {d}")));
        }
        if coord >= d {
            return Err(Error::Domain(format!("coordinate {coord} out of range")));
        }
        let nodes_per_axis = match d - 1 {
            0 => 0,
            1 | 2 => 32,
            _ => 16,
        };
        let gl = GaussLegendre::new(8);
        let axis = gl.composite(-1.0, 1.0, nodes_per_axis.max(8) / 8);
        let axes = vec![axis; d - 1];
        let mut x = vec![0.0; d];
        Ok(grid
            .iter()
            .map(|&g| {
                if !(-1.0..=1.0).contains(&g) {
                    return 0.0;
                }
                let mut acc = 0.0;
                tensor_for_each(&axes, |rest, w| {
                    let mut k = 0;
                    for (i, slot) in x.iter_mut().enumerate() {
                        if i == coord {
                            *slot = g;
                        } else {
                            *slot = rest[k];
                            k += 1;
                        }
                    }
                    acc += w * self.density(&x);
                });
                acc
            })
            .collect())
    }

    /// Stable digest of the clique structure and components.
    pub fn spec_hash(&self) -> String {
        let body = serde_json::to_string(&(&self.cliques, &self.components)).expect("serializable");
        let digest = Sha256::digest(body.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Density spec file: clique list with explicit or generated components,
/// plus the normalization once computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySpecFile {
    pub dim: usize,
    pub max_order: usize,
    #[serde(default)]
    pub cliques: Vec<CliqueEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<NormalizationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliqueEntry {
    pub indices: Vec<usize>,
    pub beta: f64,
    pub holder_c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<Vec<CosineTerm>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub max_freq: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub log_z: f64,
    pub quad_tol: f64,
    pub lower: f64,
    pub upper: f64,
}

impl DensitySpecFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("density spec: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("density spec: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    fn parts(&self) -> Result<Vec<(Vec<usize>, SmoothComponent)>> {
        self.cliques
            .iter()
            .map(|e| {
                let arity = e.indices.len();
                let comp = match (&e.terms, &e.generator) {
                    (Some(terms), None) => SmoothComponent::new(arity, terms.clone(), e.beta, e.holder_c)?,
                    (None, Some(g)) => SmoothComponent::generate(arity, e.beta, e.holder_c, g.max_freq, g.seed)?,
                    _ => {
                        return Err(Error::Format(format!(
                            "clique {:?} needs exactly one of `terms` or `generator`",
                            e.indices
                        )))
                    }
                };
                Ok((e.indices.clone(), comp))
            })
            .collect()
    }

    /// Builds the density, reusing a stored normalization when present.
    pub fn build(&self, quad: QuadSpec) -> Result<InteractionDensity> {
        let parts = self.parts()?;
        let density = InteractionDensity::from_parts_merging(
            self.dim,
            self.max_order,
            parts,
            // normalization is cheap to redo in low dimension; the stored
            // record is used as-is otherwise
            match self.normalization {
                Some(_) if self.dim > 4 => QuadSpec::Tensor {
                    rel_tol: f64::INFINITY,
                    max_level: 0,
                },
                _ => quad,
            },
        );
        match (self.normalization, density) {
            (Some(rec), Ok(d)) if self.dim > 4 => InteractionDensity::from_normalized_parts(
                d.cliques.clone(),
                d.components.clone(),
                rec.log_z,
                rec.quad_tol,
            ),
            (_, Err(Error::Unsupported(_))) if self.normalization.is_some() => {
                let rec = self.normalization.unwrap();
                let parts = self.parts()?;
                let (cl, comps): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
                InteractionDensity::from_normalized_parts(
                    CliqueSet::new(self.dim, self.max_order, cl)?,
                    comps,
                    rec.log_z,
                    rec.quad_tol,
                )
            }
            (_, d) => d,
        }
    }

    /// Copy of this spec with the normalization of `density` recorded.
    pub fn with_normalization(&self, density: &InteractionDensity) -> Self {
        let mut out = self.clone();
        out.normalization = Some(NormalizationRecord {
            log_z: density.log_z(),
            quad_tol: density.quad_tol(),
            lower: density.bounds().0,
            upper: density.bounds().1,
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::adaptive_integrate;

    fn one_d(terms: Vec<CosineTerm>) -> InteractionDensity {
        let comp = SmoothComponent::new(1, terms, 1.0, 100.0).unwrap();
        InteractionDensity::normalize(
            CliqueSet::new(1, 1, vec![vec![0]]).unwrap(),
            vec![comp],
            QuadSpec::auto(1),
        )
        .unwrap()
    }

    #[test]
    fn zero_components_give_uniform() {
        let d = InteractionDensity::normalize(
            CliqueSet::new(2, 2, vec![vec![0, 1]]).unwrap(),
            vec![SmoothComponent::zero(2)],
            QuadSpec::auto(2),
        )
        .unwrap();
        for x in [[0.0, 0.0], [0.9, -0.3], [-1.0, 1.0]] {
            assert!((d.log_density(&x).unwrap() - 0.25f64.ln()).abs() < 1e-14);
        }
        let u3 = InteractionDensity::uniform(3).unwrap();
        assert!((u3.log_z() - 8f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn log_density_rejects_points_outside() {
        let d = InteractionDensity::uniform(2).unwrap();
        assert!(matches!(d.log_density(&[1.01, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn normalization_matches_adaptive_quadrature() {
        let terms = vec![
            CosineTerm {
                freq: vec![1],
                coef: 0.4,
            },
            CosineTerm {
                freq: vec![3],
                coef: -0.1,
            },
        ];
        let d = one_d(terms.clone());
        let comp = SmoothComponent::new(1, terms, 1.0, 100.0).unwrap();
        let z = adaptive_integrate(&|x: f64| comp.eval(&[x]).exp(), -1.0, 1.0, 1e-13, 0.0, 30).unwrap();
        assert!((d.log_z() - z.ln()).abs() < 1e-9);
        assert!(d.quad_tol() < 1e-6);
    }

    #[test]
    fn certified_bounds_contain_density() {
        let comp = SmoothComponent::generate(2, 1.0, 0.8, 3, 5).unwrap();
        assert!((comp.certified_constant() - 0.8).abs() < 1e-12 || comp.certified_constant() < 0.8);
        let d = InteractionDensity::normalize(
            CliqueSet::new(2, 2, vec![vec![0, 1]]).unwrap(),
            vec![comp],
            QuadSpec::auto(2),
        )
        .unwrap();
        let (lo, hi) = d.bounds();
        let mut rng = stream(3, 0);
        for _ in 0..10_000 {
            let x = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
            let p = d.density(&x);
            assert!(p >= lo && p <= hi);
        }
        assert!(d.c1() > 1.0);
    }

    #[test]
    fn sup_bound_half_gives_ratio_at_most_e() {
        let comp = SmoothComponent::new(
            2,
            vec![
                CosineTerm {
                    freq: vec![1, 0],
                    coef: 0.3,
                },
                CosineTerm {
                    freq: vec![1, 1],
                    coef: -0.2,
                },
            ],
            1.0,
            10.0,
        )
        .unwrap();
        assert!((comp.sup_bound() - 0.5).abs() < 1e-15);
        let d = InteractionDensity::normalize(
            CliqueSet::new(2, 2, vec![vec![0, 1]]).unwrap(),
            vec![comp],
            QuadSpec::auto(2),
        )
        .unwrap();
        let (lo, hi) = d.bounds();
        assert!(hi / lo <= std::f64::consts::E * (1.0 + 1e-12));
    }

    #[test]
    fn generated_components_respect_decay_and_certificate() {
        for beta in [0.5, 1.0, 1.5, 2.0] {
            let c = SmoothComponent::generate(2, beta, 1.2, 4, 17).unwrap();
            assert!(c.certified_constant() <= 1.2 * (1.0 + 1e-12));
            let decay = beta + 1.0 + 1.0;
            for t in c.terms() {
                let k = t.freq.iter().map(|&f| (f * f) as f64).sum::<f64>().sqrt();
                assert!(t.coef.abs() <= 1.2 * k.powf(-decay) * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn rejects_bad_cliques() {
        assert!(CliqueSet::new(3, 2, vec![vec![0, 1, 2]]).is_err());
        assert!(CliqueSet::new(3, 2, vec![vec![0, 3]]).is_err());
        assert!(CliqueSet::new(3, 2, vec![vec![0, 1], vec![0, 1]]).is_err());
        assert!(CliqueSet::new(3, 2, vec![vec![1, 0]]).is_err());
    }

    #[test]
    fn dependency_graph_cliques() {
        let s = CliqueSet::from_dependency_graph(4, 2, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        assert_eq!(s.cliques(), &[vec![0, 1], vec![1, 2], vec![2, 3]]);
        let t = CliqueSet::from_dependency_graph(3, 3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        assert_eq!(t.cliques(), &[vec![0, 1, 2]]);
    }

    #[test]
    fn duplicates_merge_by_summing() {
        let a = SmoothComponent::new(
            2,
            vec![CosineTerm {
                freq: vec![1, 0],
                coef: 0.2,
            }],
            1.0,
            10.0,
        )
        .unwrap();
        let b = SmoothComponent::new(
            2,
            vec![CosineTerm {
                freq: vec![0, 1],
                coef: 0.1,
            }],
            1.0,
            10.0,
        )
        .unwrap();
        let merged = InteractionDensity::from_parts_merging(
            2,
            2,
            vec![(vec![0, 1], a.clone()), (vec![1, 0], b)],
            QuadSpec::auto(2),
        )
        .unwrap();
        assert_eq!(merged.cliques().len(), 1);
        // b on (1,0) means its first slot is x1; after sorting it multiplies x0's slot by 1 frequency 0
        let expect = SmoothComponent::new(
            2,
            vec![
                CosineTerm {
                    freq: vec![1, 0],
                    coef: 0.2,
                },
                CosineTerm {
                    freq: vec![1, 0],
                    coef: 0.1,
                },
            ],
            1.0,
            20.0,
        )
        .unwrap();
        let x = [0.3, -0.6];
        let want = expect.eval(&x);
        let got = merged.components()[0].eval(&x);
        assert!((want - got).abs() < 1e-15);
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = one_d(vec![CosineTerm {
            freq: vec![1],
            coef: 0.5,
        }]);
        let a = d.sample(5000, 4).unwrap();
        let b = d.sample(5000, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5000);
        assert!(a.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn uniform_sampler_accepts_everything() {
        let d = InteractionDensity::uniform(2).unwrap();
        let (lo, hi) = d.bounds();
        assert_eq!(lo, hi);
        let s = d.sample(20_000, 1).unwrap();
        let m = s.mean();
        let v = s.variance();
        for j in 0..2 {
            assert!(m[j].abs() < 3.0 * (1.0 / 3.0f64 / 20_000.0).sqrt());
            assert!((v[j] - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn product_marginal_is_normalized_factor() {
        let f1 = SmoothComponent::new(
            1,
            vec![CosineTerm {
                freq: vec![1],
                coef: 0.6,
            }],
            1.0,
            10.0,
        )
        .unwrap();
        let f2 = SmoothComponent::new(
            1,
            vec![CosineTerm {
                freq: vec![2],
                coef: -0.4,
            }],
            1.0,
            10.0,
        )
        .unwrap();
        let d = InteractionDensity::normalize(
            CliqueSet::new(2, 1, vec![vec![0], vec![1]]).unwrap(),
            vec![f1.clone(), f2],
            QuadSpec::auto(2),
        )
        .unwrap();
        let z1 = adaptive_integrate(&|x: f64| f1.eval(&[x]).exp(), -1.0, 1.0, 1e-13, 0.0, 30).unwrap();
        let grid = [-0.9, -0.2, 0.0, 0.55, 1.0];
        let m = d.marginal_1d(0, &grid).unwrap();
        for (g, v) in grid.iter().zip(m) {
            let want = f1.eval(&[*g]).exp() / z1;
            assert!((v - want).abs() < 1e-8, "{g}: {v} vs {want}");
        }
        let u = InteractionDensity::uniform(3)
            .unwrap()
            .marginal_1d(2, &[0.1, -0.5])
            .unwrap();
        assert!(u.iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn spec_file_round_trip_and_build() {
        let text = r#"
dim = 2
max_order = 2

[[cliques]]
indices = [0, 1]
beta = 1.0
holder_c = 1.0
generator = { seed = 3, max_freq = 3 }

[[cliques]]
indices = [1]
beta = 1.0
holder_c = 5.0
terms = [{ freq = [1], coef = 0.25 }]
"#;
        let spec = DensitySpecFile::from_toml(text).unwrap();
        let d = spec.build(QuadSpec::auto(2)).unwrap();
        let saved = spec.with_normalization(&d);
        let back = DensitySpecFile::from_toml(&saved.to_toml().unwrap()).unwrap();
        assert_eq!(back, saved);
        let d2 = back.build(QuadSpec::auto(2)).unwrap();
        assert_eq!(d.spec_hash(), d2.spec_hash());
        assert!((d.log_z() - d2.log_z()).abs() < 1e-12);
    }
}
