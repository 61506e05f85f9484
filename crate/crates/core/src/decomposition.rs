//! Pairwise-product densities `p̄₀(z) = ∏_{(i,j)∈S} f_{ij}(z_i, z_j)` and
//! the expansion of their diffusion
//!
//! `p_t(x) = m_t^{-d} Σ_{A⊆S} G_{S∖A}(x, t) Δ_A(x, t)`,
//!
//! with `G_K = ∏_K f_{ij}(x_i/m_t, x_j/m_t)` and
//! `Δ_A = E_y ∏_A [f_{ij}((x_i + σ_t y_i)/m_t, ·) − f_{ij}(x_i/m_t, ·)]`,
//! `y ~ N(0, I)`. Components are global formulas, so arguments that leave
//! the cube are well defined. Nothing here is normalized.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::quad::{normal_pdf, tensor_for_each, GaussHermite, GaussLegendre};
use crate::schedule::Schedule;

/// One additive piece of a pair component, a function of `(u, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Term {
    Linear {
        a: f64,
        b: f64,
    },
    Quadratic {
        uu: f64,
        uv: f64,
        vv: f64,
    },
    /// `ell · |a u + b v − off|`, Lipschitz but not differentiable on the ridge.
    AbsRidge {
        ell: f64,
        a: f64,
        b: f64,
        off: f64,
    },
    /// `amp · cos(π (ku u + kv v))`.
    Cosine {
        ku: f64,
        kv: f64,
        amp: f64,
    },
}

impl Term {
    fn eval(&self, u: f64, v: f64) -> f64 {
        match *self {
            Term::Linear { a, b } => a * u + b * v,
            Term::Quadratic { uu, uv, vv } => uu * u * u + uv * u * v + vv * v * v,
            Term::AbsRidge { ell, a, b, off } => ell * (a * u + b * v - off).abs(),
            Term::Cosine { ku, kv, amp } => amp * (PI * (ku * u + kv * v)).cos(),
        }
    }

    fn grad(&self, u: f64, v: f64) -> Option<[f64; 2]> {
        match *self {
            Term::Linear { a, b } => Some([a, b]),
            Term::Quadratic { uu, uv, vv } => Some([2.0 * uu * u + uv * v, uv * u + 2.0 * vv * v]),
            Term::AbsRidge { .. } => None,
            Term::Cosine { ku, kv, amp } => {
                let s = -amp * PI * (PI * (ku * u + kv * v)).sin();
                Some([s * ku, s * kv])
            }
        }
    }

    /// Global Lipschitz constant in the Euclidean norm of `(u, v)`.
    fn lipschitz(&self) -> Option<f64> {
        match *self {
            Term::Linear { a, b } => Some(a.hypot(b)),
            Term::Quadratic { .. } => None,
            Term::AbsRidge { ell, a, b, .. } => Some(ell.abs() * a.hypot(b)),
            Term::Cosine { ku, kv, amp } => Some(amp.abs() * PI * ku.hypot(kv)),
        }
    }

    /// Upper bound on `max(−term, 0)` over `[-1, 1]²`.
    fn negative_part_bound(&self) -> f64 {
        match *self {
            Term::Linear { a, b } => a.abs() + b.abs(),
            Term::Quadratic { uu, uv, vv } => (-uu).max(0.0) + uv.abs() + (-vv).max(0.0),
            Term::AbsRidge { ell, a, b, off } => {
                if ell >= 0.0 {
                    0.0
                } else {
                    ell.abs() * (a.abs() + b.abs() + off.abs())
                }
            }
            Term::Cosine { amp, .. } => amp.abs(),
        }
    }
}

/// `f_{ij}(u, v) = c0 + Σ terms`, evaluated at `(z_i, z_j)`; `i = j` is allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairComponent {
    pub i: usize,
    pub j: usize,
    pub c0: f64,
    #[serde(default)]
    pub terms: Vec<Term>,
}

impl PairComponent {
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        self.c0 + self.terms.iter().map(|t| t.eval(u, v)).sum::<f64>()
    }

    /// `[∂f/∂u, ∂f/∂v]`, or `None` when some term is not differentiable.
    pub fn grad(&self, u: f64, v: f64) -> Option<[f64; 2]> {
        let mut g = [0.0; 2];
        for t in &self.terms {
            let h = t.grad(u, v)?;
            g[0] += h[0];
            g[1] += h[1];
        }
        Some(g)
    }

    /// Certified global Lipschitz constant, if every term has one.
    pub fn lipschitz(&self) -> Option<f64> {
        self.terms.iter().map(Term::lipschitz).sum()
    }

    pub fn is_differentiable(&self) -> bool {
        self.terms.iter().all(|t| !matches!(t, Term::AbsRidge { .. }))
    }

    /// Certified lower bound on the cube.
    pub fn lower_bound(&self) -> f64 {
        self.c0 - self.terms.iter().map(Term::negative_part_bound).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductDensitySpec {
    pub name: String,
    pub dim: usize,
    pub pairs: Vec<PairComponent>,
}

impl ProductDensitySpec {
    pub fn new(name: impl Into<String>, dim: usize, pairs: Vec<PairComponent>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Domain("dimension must be positive".into()));
        }
        for (k, p) in pairs.iter().enumerate() {
            if p.i >= dim || p.j >= dim {
                return Err(Error::Domain(format!("pair {k} indexes past dimension {dim}")));
            }
            if pairs[..k].iter().any(|q| (q.i, q.j) == (p.i, p.j)) {
                return Err(Error::Domain(format!("pair ({}, {}) repeated", p.i, p.j)));
            }
            let all_finite = p.c0.is_finite()
                && p.terms.iter().all(|t| match *t {
                    Term::Linear { a, b } => a.is_finite() && b.is_finite(),
                    Term::Quadratic { uu, uv, vv } => uu.is_finite() && uv.is_finite() && vv.is_finite(),
                    Term::AbsRidge { ell, a, b, off } => {
                        ell.is_finite() && a.is_finite() && b.is_finite() && off.is_finite()
                    }
                    Term::Cosine { ku, kv, amp } => ku.is_finite() && kv.is_finite() && amp.is_finite(),
                });
            if !all_finite {
                return Err(Error::Domain(format!("pair {k} has non-finite coefficients")));
            }
            if p.lower_bound() <= 0.0 {
                return Err(Error::Domain(format!(
                    "pair ({}, {}) is not certified positive on the cube",
                    p.i, p.j
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            dim,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `p̄₀(z)`, unnormalized and defined on all of `R^d`.
    pub fn eval(&self, z: &[f64]) -> f64 {
        self.pairs.iter().map(|p| p.eval(z[p.i], z[p.j])).product()
    }

    pub fn is_lipschitz(&self) -> bool {
        self.pairs.iter().all(|p| p.lipschitz().is_some())
    }

    pub fn is_differentiable(&self) -> bool {
        self.pairs.iter().all(PairComponent::is_differentiable)
    }

    /// Sorted coordinates touched by the pairs in `subset`.
    pub fn active_coords(&self, subset: &[usize]) -> Vec<usize> {
        let mut c: Vec<usize> = subset
            .iter()
            .flat_map(|&k| [self.pairs[k].i, self.pairs[k].j])
            .collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    fn check_subset(&self, subset: &[usize]) -> Result<()> {
        for (n, &k) in subset.iter().enumerate() {
            if k >= self.pairs.len() {
                return Err(Error::Domain(format!("pair index {k} out of range")));
            }
            if subset[..n].contains(&k) {
                return Err(Error::Domain(format!("pair index {k} repeated in subset")));
            }
        }
        Ok(())
    }

    /// Ridge and linear single-pair spec in `d = 2`.
    pub fn ridge_single() -> Self {
        Self::new(
            "ridge-single",
            2,
            vec![PairComponent {
                i: 0,
                j: 1,
                c0: 1.5,
                terms: vec![
                    Term::AbsRidge {
                        ell: 0.4,
                        a: 1.0,
                        b: -1.0,
                        off: 0.0,
                    },
                    Term::Linear { a: 0.2, b: -0.1 },
                ],
            }],
        )
        .expect("valid spec")
    }

    /// Two crossing ridges on the ordered pairs `(0, 1)` and `(1, 0)`; both
    /// kinks pass through the origin.
    pub fn ridge_pair() -> Self {
        Self::new(
            "ridge-pair",
            2,
            vec![
                PairComponent {
                    i: 0,
                    j: 1,
                    c0: 1.5,
                    terms: vec![Term::AbsRidge {
                        ell: 0.4,
                        a: 1.0,
                        b: -1.0,
                        off: 0.0,
                    }],
                },
                PairComponent {
                    i: 1,
                    j: 0,
                    c0: 1.2,
                    terms: vec![
                        Term::AbsRidge {
                            ell: 0.3,
                            a: 1.0,
                            b: 1.0,
                            off: 0.0,
                        },
                        Term::Cosine {
                            ku: 1.0,
                            kv: 0.5,
                            amp: 0.1,
                        },
                    ],
                },
            ],
        )
        .expect("valid spec")
    }

    /// Smooth two-pair spec (cosine and linear terms) with gradients.
    pub fn smooth_pair() -> Self {
        Self::new(
            "smooth-pair",
            2,
            vec![
                PairComponent {
                    i: 0,
                    j: 1,
                    c0: 1.5,
                    terms: vec![
                        Term::Cosine {
                            ku: 1.0,
                            kv: 1.0,
                            amp: 0.3,
                        },
                        Term::Linear { a: 0.2, b: 0.1 },
                    ],
                },
                PairComponent {
                    i: 0,
                    j: 0,
                    c0: 1.3,
                    terms: vec![Term::Cosine {
                        ku: 0.5,
                        kv: 1.0,
                        amp: 0.25,
                    }],
                },
            ],
        )
        .expect("valid spec")
    }

    /// `f(u, v) = 1 + u + v` scaled to stay positive on the cube.
    pub fn linear_single() -> Self {
        Self::new(
            "linear-single",
            2,
            vec![PairComponent {
                i: 0,
                j: 1,
                c0: 3.0,
                terms: vec![Term::Linear { a: 1.0, b: 1.0 }],
            }],
        )
        .expect("valid spec")
    }

    /// Specs shipped with the verification suite.
    pub fn shipped() -> Vec<Self> {
        vec![
            Self::ridge_single(),
            Self::ridge_pair(),
            Self::smooth_pair(),
            Self::linear_single(),
        ]
    }
}

/// A point `x ∈ [−m_t, m_t]^d` at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub x: Vec<f64>,
    pub t: f64,
    pub m: f64,
    pub sigma: f64,
}

impl Probe {
    pub fn new(x: Vec<f64>, t: f64, schedule: &Schedule) -> Result<Self> {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("probe time must be positive, got {t}")));
        }
        let (m, sigma) = schedule.m_sigma(t)?;
        if x.iter().any(|v| !(v.abs() <= m)) {
            return Err(Error::Domain(format!(
                "probe {x:?} lies outside [-m_t, m_t]^d with m_t = {m}"
            )));
        }
        Ok(Self { x, t, m, sigma })
    }

    /// `x / m_t`.
    pub fn scaled(&self) -> Vec<f64> {
        self.x.iter().map(|v| v / self.m).collect()
    }
}

/// Noise levels of the verification time grid.
pub const SIGMA_GRID: [f64; 6] = [0.001, 0.003, 0.01, 0.03, 0.1, 0.3];

/// Tensor grid of `per_axis` points of `[-1, 1]` per coordinate, mapped to
/// `x = m_t x̃`, at every noise level in `sigmas`.
pub fn probe_grid(dim: usize, per_axis: usize, sigmas: &[f64], schedule: &Schedule) -> Result<Vec<Probe>> {
    if per_axis < 2 {
        return Err(Error::Domain("need at least two points per axis".into()));
    }
    let axis: Vec<f64> = (0..per_axis)
        .map(|k| -1.0 + 2.0 * k as f64 / (per_axis - 1) as f64)
        .collect();
    let cells = per_axis.pow(dim as u32);
    let mut out = Vec::with_capacity(cells * sigmas.len());
    for &s in sigmas {
        let t = schedule.time_for_sigma(s)?;
        let (m, sigma) = schedule.m_sigma(t)?;
        for mut c in 0..cells {
            let mut x = Vec::with_capacity(dim);
            for _ in 0..dim {
                x.push(m * axis[c % per_axis]);
                c /= per_axis;
            }
            out.push(Probe { x, t, m, sigma });
        }
    }
    Ok(out)
}

/// One-dimensional rule for `E g(y)`, `y ~ N(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Rule {
    Hermite {
        nodes: usize,
    },
    /// Composite 8-node Gauss–Legendre on `[-half_width, half_width]` with
    /// the normal density folded into the weights. Converges like `h²` on
    /// kinked integrands, where Gauss–Hermite stalls.
    Legendre {
        panels: usize,
        half_width: f64,
    },
}

/// Tensor rule used for the `y` integrals.
#[derive(Debug, Clone)]
pub struct Integrator {
    rule: Rule,
    axis: (Vec<f64>, Vec<f64>),
    max_active: usize,
}

impl Default for Integrator {
    fn default() -> Self {
        Self::new(40)
    }
}

impl Integrator {
    /// Gauss–Hermite with `nodes` per active coordinate.
    pub fn new(nodes: usize) -> Self {
        Self::with_rule(Rule::Hermite { nodes })
    }

    pub fn with_rule(rule: Rule) -> Self {
        let axis = match rule {
            Rule::Hermite { nodes } => {
                let gh = GaussHermite::new(nodes);
                (gh.nodes().to_vec(), gh.weights().to_vec())
            }
            Rule::Legendre { panels, half_width } => {
                let (xs, ws) = GaussLegendre::new(8).composite(-half_width, half_width, panels);
                let ws = xs.iter().zip(ws).map(|(x, w)| w * normal_pdf(*x)).collect();
                (xs, ws)
            }
        };
        Self {
            rule,
            axis,
            max_active: 4,
        }
    }

    /// Gauss–Hermite (40 nodes) for smooth specs; composite Legendre
    /// (24 panels on `[-9, 9]`) when some component has a kink.
    pub fn for_spec(spec: &ProductDensitySpec) -> Self {
        if spec.is_differentiable() {
            Self::default()
        } else {
            Self::with_rule(Rule::Legendre {
                panels: 24,
                half_width: 9.0,
            })
        }
    }

    pub fn rule(&self) -> Rule {
        self.rule
    }

    pub fn nodes(&self) -> usize {
        self.axis.0.len()
    }

    /// `E g(y)` over the coordinates in `active`; the others are held at 0.
    fn expect<F: FnMut(&[f64]) -> f64>(&self, dim: usize, active: &[usize], mut g: F) -> Result<f64> {
        if active.len() > self.max_active {
            return Err(Error::Unsupported(format!(
                "{} active coordinates exceeds the tensor limit {}",
                active.len(),
                self.max_active
            )));
        }
        let axes = vec![self.axis.clone(); active.len()];
        let mut y = vec![0.0; dim];
        let mut total = 0.0;
        tensor_for_each(&axes, |nodes, w| {
            for (&c, &v) in active.iter().zip(nodes) {
                y[c] = v;
            }
            total += w * g(&y);
        });
        if !total.is_finite() {
            return Err(Error::Numeric("quadrature sum is not finite".into()));
        }
        Ok(total)
    }
}

fn check_probe(spec: &ProductDensitySpec, probe: &Probe) -> Result<()> {
    if probe.x.len() != spec.dim {
        return Err(Error::Shape(format!(
            "probe has {} coordinates, spec has {}",
            probe.x.len(),
            spec.dim
        )));
    }
    if probe.x.iter().any(|v| !(v.abs() <= probe.m)) {
        return Err(Error::Domain("probe lies outside [-m_t, m_t]^d".into()));
    }
    Ok(())
}

/// `G_K(x, t) = ∏_{k∈K} f_k(x_i/m_t, x_j/m_t)`.
pub fn eval_g(spec: &ProductDensitySpec, subset: &[usize], probe: &Probe) -> Result<f64> {
    spec.check_subset(subset)?;
    check_probe(spec, probe)?;
    let xs = probe.scaled();
    Ok(subset
        .iter()
        .map(|&k| {
            let p = &spec.pairs[k];
            p.eval(xs[p.i], xs[p.j])
        })
        .product())
}

/// `Δ_{ij}` at the shifted point `(x + σ_t y)/m_t`.
fn pair_residual(p: &PairComponent, xs: &[f64], s: f64, y: &[f64]) -> f64 {
    let (u, v) = (xs[p.i], xs[p.j]);
    p.eval(u + s * y[p.i], v + s * y[p.j]) - p.eval(u, v)
}

/// `Δ_A(x, t)`.
pub fn eval_delta(spec: &ProductDensitySpec, subset: &[usize], probe: &Probe, integ: &Integrator) -> Result<f64> {
    spec.check_subset(subset)?;
    check_probe(spec, probe)?;
    if subset.is_empty() {
        return Ok(1.0);
    }
    let xs = probe.scaled();
    let s = probe.sigma / probe.m;
    let active = spec.active_coords(subset);
    integ.expect(spec.dim, &active, |y| {
        subset
            .iter()
            .map(|&k| pair_residual(&spec.pairs[k], &xs, s, y))
            .product()
    })
}

/// `p_{t,B}(x) = E ∏_B f_k((x + σ_t y)/m_t)`.
pub fn eval_partial_density(
    spec: &ProductDensitySpec,
    subset: &[usize],
    probe: &Probe,
    integ: &Integrator,
) -> Result<f64> {
    spec.check_subset(subset)?;
    check_probe(spec, probe)?;
    let xs = probe.scaled();
    let s = probe.sigma / probe.m;
    let active = spec.active_coords(subset);
    integ.expect(spec.dim, &active, |y| {
        subset
            .iter()
            .map(|&k| {
                let p = &spec.pairs[k];
                p.eval(xs[p.i] + s * y[p.i], xs[p.j] + s * y[p.j])
            })
            .product()
    })
}

/// Direct quadrature of `p_t(x) = ∫ p̄₀(z) N(x; m_t z, σ_t² I) dz` with
/// composite Gauss–Legendre over `z ∈ x/m_t ± 10 σ_t/m_t` (`d ≤ 3`).
pub fn direct_density(spec: &ProductDensitySpec, probe: &Probe, panels: usize) -> Result<f64> {
    check_probe(spec, probe)?;
    let d = spec.dim;
    if d > 3 {
        return Err(Error::Unsupported(format!(
            "direct quadrature supports d <= 3, got {d}"
        )));
    }
    let gl = GaussLegendre::new(8);
    let (m, s) = (probe.m, probe.sigma);
    let half = 10.0 * s / m;
    let axes: Vec<_> = probe
        .x
        .iter()
        .map(|&x| gl.composite(x / m - half, x / m + half, panels))
        .collect();
    let norm = (2.0 * PI * s * s).powf(-(d as f64) / 2.0);
    let mut total = 0.0;
    tensor_for_each(&axes, |z, w| {
        let q: f64 = probe.x.iter().zip(z).map(|(x, z)| (x - m * z).powi(2)).sum();
        total += w * spec.eval(z) * (-q / (2.0 * s * s)).exp();
    });
    total *= norm;
    if !total.is_finite() {
        return Err(Error::Numeric("direct quadrature is not finite".into()));
    }
    Ok(total)
}

/// All subsets of `{0, …, n−1}` as sorted index lists, by bitmask order.
pub fn subsets(n: usize) -> Vec<Vec<usize>> {
    (0..1usize << n)
        .map(|mask| (0..n).filter(|k| mask >> k & 1 == 1).collect())
        .collect()
}

fn complement(n: usize, subset: &[usize]) -> Vec<usize> {
    (0..n).filter(|k| !subset.contains(k)).collect()
}

/// Per-subset terms of the expansion at one probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub subset: Vec<usize>,
    /// `G_{S∖A}(x, t)`.
    pub g: f64,
    /// `Δ_A(x, t)`.
    pub delta: f64,
    /// Relative residual of the full expansion at this probe.
    pub residual: f64,
    /// `|Δ_A| / σ_t^{|A|}`.
    pub bound_ratio: f64,
}

/// Expands `p_t` at one probe and compares with [`direct_density`].
pub fn decompose(
    spec: &ProductDensitySpec,
    probe: &Probe,
    integ: &Integrator,
    panels: usize,
) -> Result<Vec<DecompositionReport>> {
    let n = spec.len();
    let mut rows = Vec::with_capacity(1 << n);
    let mut sum = 0.0;
    for a in subsets(n) {
        let g = eval_g(spec, &complement(n, &a), probe)?;
        let delta = eval_delta(spec, &a, probe, integ)?;
        sum += g * delta;
        let bound_ratio = delta.abs() / probe.sigma.powi(a.len() as i32);
        rows.push(DecompositionReport {
            subset: a,
            g,
            delta,
            residual: 0.0,
            bound_ratio,
        });
    }
    let expanded = sum * probe.m.powi(-(spec.dim as i32));
    let direct = direct_density(spec, probe, panels)?;
    let residual = (expanded - direct).abs() / direct.abs();
    for r in &mut rows {
        r.residual = residual;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub max_relative_residual: f64,
    pub probes: usize,
    /// Residual per probe, in probe order.
    pub residuals: Vec<f64>,
}

/// Checks the subset expansion of `p_t` against direct quadrature over all
/// probes (`d ≤ 3`, `|S| ≤ 3`).
pub fn verify_identity(
    spec: &ProductDensitySpec,
    probes: &[Probe],
    integ: &Integrator,
    panels: usize,
) -> Result<IdentityCheck> {
    if spec.dim > 3 || spec.len() > 3 {
        return Err(Error::Unsupported("identity check supports d <= 3 and |S| <= 3".into()));
    }
    let residuals: Vec<f64> = probes
        .par_iter()
        .map(|p| decompose(spec, p, integ, panels).map(|rows| rows[0].residual))
        .collect::<Result<_>>()?;
    Ok(IdentityCheck {
        max_relative_residual: residuals.iter().copied().fold(0.0, f64::max),
        probes: probes.len(),
        residuals,
    })
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn ls_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallnessCheck {
    pub subset: Vec<usize>,
    /// Distinct noise levels, ascending.
    pub sigmas: Vec<f64>,
    /// `max_x |Δ_A|` per noise level.
    pub max_abs_delta: Vec<f64>,
    /// Log-log slope of `max |Δ_A|` against `σ_t` over `σ_t ≤ 0.1`.
    pub slope: f64,
    /// `max |Δ_A| / σ_t^{|A|}` over all probes.
    pub fitted_constant: f64,
    /// Certificate `max_t m_t^{−|A|} ∏ Lip_k · E ∏ ‖(y_i, y_j)‖` (Hölder bound).
    pub certified_bound: f64,
}

/// `E R^k` for the displacement norm of one pair: `χ₂` when `i ≠ j`,
/// `√2 |y|` when `i = j`.
fn pair_norm_moment(diagonal: bool, k: f64) -> f64 {
    if diagonal {
        2f64.powf(k) * gamma((k + 1.0) / 2.0) / PI.sqrt()
    } else {
        2f64.powf(k / 2.0) * gamma(1.0 + k / 2.0)
    }
}

pub fn verify_smallness(
    spec: &ProductDensitySpec,
    subset: &[usize],
    probes: &[Probe],
    integ: &Integrator,
) -> Result<SmallnessCheck> {
    spec.check_subset(subset)?;
    if subset.is_empty() {
        return Err(Error::Domain("smallness needs a nonempty subset".into()));
    }
    let mut lip = 1.0;
    for &k in subset {
        lip *= spec.pairs[k]
            .lipschitz()
            .ok_or_else(|| Error::Unsupported(format!("pair {k} has no Lipschitz certificate")))?;
    }
    let deltas: Vec<f64> = probes
        .par_iter()
        .map(|p| eval_delta(spec, subset, p, integ))
        .collect::<Result<_>>()?;
    let a = subset.len() as i32;
    let mut sigmas: Vec<f64> = probes.iter().map(|p| p.sigma).collect();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    let max_abs_delta: Vec<f64> = sigmas
        .iter()
        .map(|&s| {
            probes
                .iter()
                .zip(&deltas)
                .filter(|(p, _)| p.sigma == s)
                .map(|(_, d)| d.abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let (lx, ly): (Vec<f64>, Vec<f64>) = sigmas
        .iter()
        .zip(&max_abs_delta)
        .filter(|(s, d)| **s <= 0.1 + 1e-12 && **d > 0.0)
        .map(|(s, d)| (s.ln(), d.ln()))
        .unzip();
    let slope = if lx.len() >= 2 { ls_fit(&lx, &ly).0 } else { f64::NAN };
    let fitted_constant = probes
        .iter()
        .zip(&deltas)
        .map(|(p, d)| d.abs() / p.sigma.powi(a))
        .fold(0.0, f64::max);
    let kf = a as f64;
    let moment: f64 = subset
        .iter()
        .map(|&k| {
            let p = &spec.pairs[k];
            pair_norm_moment(p.i == p.j, kf).powf(1.0 / kf)
        })
        .product();
    let m_min = probes.iter().map(|p| p.m).fold(f64::INFINITY, f64::min);
    Ok(SmallnessCheck {
        subset: subset.to_vec(),
        sigmas,
        max_abs_delta,
        slope,
        fitted_constant,
        certified_bound: lip * moment * m_min.powi(-a),
    })
}

/// `Σ_{B⊆A} (−1)^{|A∖B|} G_{A∖B} p_{t,B}` at one probe.
pub fn delta_by_refactor(
    spec: &ProductDensitySpec,
    subset: &[usize],
    probe: &Probe,
    integ: &Integrator,
) -> Result<f64> {
    spec.check_subset(subset)?;
    let mut sum = 0.0;
    for mask in subsets(subset.len()) {
        let b: Vec<usize> = mask.iter().map(|&k| subset[k]).collect();
        let rest: Vec<usize> = complement(subset.len(), &mask).iter().map(|&k| subset[k]).collect();
        let sign = if rest.len().is_multiple_of(2) { 1.0 } else { -1.0 };
        sum += sign * eval_g(spec, &rest, probe)? * eval_partial_density(spec, &b, probe, integ)?;
    }
    Ok(sum)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefactorCheck {
    /// `max |refactored − Δ_A|` over probes.
    pub max_residual: f64,
    pub probes: usize,
}

pub fn verify_delta_refactor(
    spec: &ProductDensitySpec,
    subset: &[usize],
    probes: &[Probe],
    integ: &Integrator,
) -> Result<RefactorCheck> {
    let res: Vec<f64> = probes
        .par_iter()
        .map(|p| Ok((delta_by_refactor(spec, subset, p, integ)? - eval_delta(spec, subset, p, integ)?).abs()))
        .collect::<Result<_>>()?;
    Ok(RefactorCheck {
        max_residual: res.iter().copied().fold(0.0, f64::max),
        probes: probes.len(),
    })
}

/// Role of a pair in the first-order expansion: `y_i ∂_u f`, `y_j ∂_v f`,
/// or the scaled second-order remainder `Δ⁽¹⁾`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    First,
    Second,
    Remainder,
}

/// Terms of the expansion
/// `Δ_A = σ̃^{|A|} Σ_{C⊆B⊆A} G⁽¹⁾_{B∖C,2} G⁽¹⁾_{A∖B,1} Δ⁽¹⁾_C`, `σ̃ = σ_t/m_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorExpansion {
    /// The triple sum.
    pub value: f64,
    /// Largest `|Δ⁽¹⁾_C|` over terms with nonempty `C`.
    pub max_remainder_integral: f64,
}

/// `Δ⁽¹⁾_{ij} = (Δ_{ij} − σ̃ [y_i, y_j]·D_{ij}) / σ̃`.
fn taylor_remainder(p: &PairComponent, xs: &[f64], s: f64, y: &[f64], d: [f64; 2]) -> f64 {
    pair_residual(p, xs, s, y) / s - (y[p.i] * d[0] + y[p.j] * d[1])
}

pub fn delta_by_taylor(
    spec: &ProductDensitySpec,
    subset: &[usize],
    probe: &Probe,
    integ: &Integrator,
) -> Result<TaylorExpansion> {
    spec.check_subset(subset)?;
    check_probe(spec, probe)?;
    let xs = probe.scaled();
    let s = probe.sigma / probe.m;
    let mut grads = Vec::with_capacity(subset.len());
    for &k in subset {
        let p = &spec.pairs[k];
        grads.push(
            p.grad(xs[p.i], xs[p.j])
                .ok_or_else(|| Error::Unsupported(format!("pair {k} is not differentiable")))?,
        );
    }
    let active = spec.active_coords(subset);
    let n = subset.len();
    let mut value = 0.0;
    let mut max_rem: f64 = 0.0;
    for code in 0..3usize.pow(n as u32) {
        let roles: Vec<Role> = (0..n)
            .map(|k| match code / 3usize.pow(k as u32) % 3 {
                0 => Role::First,
                1 => Role::Second,
                _ => Role::Remainder,
            })
            .collect();
        let g: f64 = roles
            .iter()
            .zip(&grads)
            .map(|(r, d)| match r {
                Role::First => d[0],
                Role::Second => d[1],
                Role::Remainder => 1.0,
            })
            .product();
        let integral = integ.expect(spec.dim, &active, |y| {
            roles
                .iter()
                .zip(subset)
                .zip(&grads)
                .map(|((r, &k), d)| {
                    let p = &spec.pairs[k];
                    match r {
                        Role::First => y[p.i],
                        Role::Second => y[p.j],
                        Role::Remainder => taylor_remainder(p, &xs, s, y, *d),
                    }
                })
                .product()
        })?;
        if roles.contains(&Role::Remainder) {
            max_rem = max_rem.max(integral.abs());
        }
        value += g * integral;
    }
    Ok(TaylorExpansion {
        value: value * s.powi(n as i32),
        max_remainder_integral: max_rem,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorCheck {
    /// `max |triple sum − Δ_A|` over probes.
    pub max_residual: f64,
    /// Distinct noise levels, ascending.
    pub sigmas: Vec<f64>,
    /// Largest remainder integral `|Δ⁽¹⁾_C|`, `C ≠ ∅`, per noise level.
    pub max_remainder: Vec<f64>,
}

pub fn verify_taylor_refactor(
    spec: &ProductDensitySpec,
    subset: &[usize],
    probes: &[Probe],
    integ: &Integrator,
) -> Result<TaylorCheck> {
    if subset.len() > 2 || !(2..=3).contains(&spec.dim) {
        return Err(Error::Unsupported(
            "first-order expansion check supports |A| <= 2 and d in {2, 3}".into(),
        ));
    }
    let rows: Vec<(f64, f64, f64)> = probes
        .par_iter()
        .map(|p| {
            let t = delta_by_taylor(spec, subset, p, integ)?;
            let d = eval_delta(spec, subset, p, integ)?;
            Ok((p.sigma, (t.value - d).abs(), t.max_remainder_integral))
        })
        .collect::<Result<_>>()?;
    let mut sigmas: Vec<f64> = rows.iter().map(|r| r.0).collect();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    let max_remainder = sigmas
        .iter()
        .map(|&s| rows.iter().filter(|r| r.0 == s).map(|r| r.2).fold(0.0, f64::max))
        .collect();
    Ok(TaylorCheck {
        max_residual: rows.iter().map(|r| r.1).fold(0.0, f64::max),
        sigmas,
        max_remainder,
    })
}
