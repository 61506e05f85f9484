//! Run configuration: everything that determines the numbers of one
//! end-to-end run, read from TOML.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use factordiff_core::density::DensitySpecFile;
use factordiff_core::optim::AdamConfig;
use factordiff_core::sampler::StepGrid;
use factordiff_core::score_matching::{capacity_for, window_for, GridSpec, TimeDraws};
use factordiff_core::{
    CliqueSet, Encoding, InteractionDensity, QuadSpec, Schedule, SmoothComponent, TimeGrid, TimeWindow,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable overriding `out_dir`.
pub const ENV_OUT_DIR: &str = "FACTORDIFF_OUT_DIR";
/// Environment variable setting the worker thread count.
pub const ENV_THREADS: &str = "FACTORDIFF_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DensityChoice {
    /// Density spec file, relative paths resolved against the config file.
    File {
        path: PathBuf,
    },
    Uniform {
        dim: usize,
    },
    /// Independent generated factors on coordinates `0..active`, uniform
    /// coordinates `active..dim`. Factor `k` uses seed `seed + k`, so the
    /// active coordinates do not depend on the padding.
    Product {
        dim: usize,
        active: usize,
        beta: f64,
        holder_c: f64,
        max_freq: u32,
        seed: u64,
    },
}

impl DensityChoice {
    pub fn dim(&self) -> usize {
        match self {
            DensityChoice::File { path } => DensitySpecFile::load(path).map(|s| s.dim).unwrap_or(0),
            DensityChoice::Uniform { dim } | DensityChoice::Product { dim, .. } => *dim,
        }
    }

    pub fn build(&self) -> Result<InteractionDensity> {
        match self {
            DensityChoice::File { path } => {
                let spec = DensitySpecFile::load(path).with_context(|| format!("reading {}", path.display()))?;
                Ok(spec.build(QuadSpec::auto(spec.dim))?)
            }
            DensityChoice::Uniform { dim } => Ok(InteractionDensity::uniform(*dim)?),
            DensityChoice::Product {
                dim,
                active,
                beta,
                holder_c,
                max_freq,
                seed,
            } => {
                ensure!(*active >= 1 && active <= dim, "need 1 <= active <= dim");
                let cliques = (0..*active).map(|k| vec![k]).collect();
                let comps = (0..*active)
                    .map(|k| SmoothComponent::generate(1, *beta, *holder_c, *max_freq, seed + k as u64))
                    .collect::<factordiff_core::Result<Vec<_>>>()?;
                // the padded coordinates are exactly uniform, so only the
                // active block needs quadrature
                let active_density = InteractionDensity::normalize(
                    CliqueSet::new(*active, 1, cliques)?,
                    comps.clone(),
                    QuadSpec::auto(*active),
                )?;
                let log_z = active_density.log_z() + (dim - active) as f64 * 2f64.ln();
                let cliques = (0..*active).map(|k| vec![k]).collect();
                Ok(InteractionDensity::from_normalized_parts(
                    CliqueSet::new(*dim, 1, cliques)?,
                    comps,
                    log_z,
                    active_density.quad_tol(),
                )?)
            }
        }
    }

    /// Interaction order of the density.
    pub fn d_star(&self) -> Result<usize> {
        Ok(match self {
            DensityChoice::File { path } => DensitySpecFile::load(path)?.max_order,
            DensityChoice::Uniform { .. } | DensityChoice::Product { .. } => 1,
        })
    }
}

/// Network size and time window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Capacity {
    Fixed {
        width: usize,
        depth: usize,
        t_lo: f64,
        t_hi: f64,
    },
    /// `W·L = wl_scale · n^{d*/(2(2β+d*))}`, `T̲ = (W L)^{-κ_lo}`,
    /// `T̄ = κ_hi log(W L)`.
    Scaled {
        wl_scale: f64,
        depth: usize,
        beta: f64,
        #[serde(default = "default_kappa_lo")]
        kappa_lo: f64,
        #[serde(default = "default_kappa_hi")]
        kappa_hi: f64,
    },
}

fn default_kappa_lo() -> f64 {
    6.0
}
fn default_kappa_hi() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelChoice {
    /// One network over the whole window.
    Network,
    /// One network per dyadic interval; `W_j L_j = wl_scale · t_j^{-d/4}`
    /// clamped to `[wl_min, wl_max]`.
    Piecewise { wl_scale: f64, wl_min: f64, wl_max: f64 },
    /// The piecewise pipeline on the one-interval grid.
    PiecewiseSingle,
    /// Exact diffused score (training skipped).
    Oracle,
    /// Score identically zero (training skipped).
    Zero,
}

impl ModelChoice {
    pub fn label(&self) -> &'static str {
        match self {
            ModelChoice::Network => "network",
            ModelChoice::Piecewise { .. } => "piecewise",
            ModelChoice::PiecewiseSingle => "piecewise-single",
            ModelChoice::Oracle => "oracle",
            ModelChoice::Zero => "zero",
        }
    }

    pub fn trains(&self) -> bool {
        !matches!(self, ModelChoice::Oracle | ModelChoice::Zero)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_final_lr")]
    pub final_lr_fraction: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_trunc_b")]
    pub trunc_b: f64,
    #[serde(default = "default_one")]
    pub mc_time_draws: usize,
    /// When set, the step count becomes `steps · (n / steps_ref_n)^steps_exponent`.
    #[serde(default)]
    pub steps_ref_n: Option<usize>,
    #[serde(default)]
    pub steps_exponent: f64,
    #[serde(default)]
    pub time_draws: TimeDraws,
    #[serde(default)]
    pub encoding: Encoding,
}

fn default_batch() -> usize {
    256
}
fn default_steps() -> usize {
    3000
}
fn default_lr() -> f64 {
    3e-3
}
fn default_final_lr() -> f64 {
    0.1
}
fn default_eval_every() -> usize {
    100
}
fn default_trunc_b() -> f64 {
    factordiff_core::nn::DEFAULT_TRUNC_B
}
fn default_one() -> usize {
    1
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: default_batch(),
            steps: default_steps(),
            lr: default_lr(),
            final_lr_fraction: default_final_lr(),
            eval_every: default_eval_every(),
            trunc_b: default_trunc_b(),
            mc_time_draws: 1,
            steps_ref_n: None,
            steps_exponent: 0.0,
            time_draws: TimeDraws::default(),
            encoding: Encoding::default(),
        }
    }
}

impl TrainSettings {
    pub fn steps_for(&self, n: usize) -> usize {
        match self.steps_ref_n {
            Some(r) if r > 0 => (self.steps as f64 * (n as f64 / r as f64).powf(self.steps_exponent))
                .round()
                .max(1.0) as usize,
            _ => self.steps,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    #[serde(default = "default_sampler_steps")]
    pub steps: usize,
    /// Number of generated samples; defaults to `n`.
    #[serde(default)]
    pub chains: Option<usize>,
    #[serde(default = "default_grid")]
    pub grid: StepGrid,
}

fn default_sampler_steps() -> usize {
    300
}
fn default_grid() -> StepGrid {
    StepGrid::Geometric { ratio: None }
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            steps: default_sampler_steps(),
            chains: None,
            grid: default_grid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSettings {
    #[serde(default = "yes")]
    pub tv: bool,
    #[serde(default = "yes")]
    pub w1: bool,
    /// Monte Carlo draws per score L2 estimate at the reference noise
    /// levels (zero disables; needs a diffused-score oracle).
    #[serde(default = "default_score_mc")]
    pub score_mc: usize,
    /// Coordinate whose one-dimensional marginal is compared.
    #[serde(default)]
    pub marginal: Option<usize>,
    /// Histogram bins per axis; default `⌈2 n^{1/(d+2)}⌉`.
    #[serde(default)]
    pub bins: Option<usize>,
    #[serde(default = "default_projections")]
    pub projections: usize,
}

fn yes() -> bool {
    true
}
fn default_score_mc() -> usize {
    4000
}
fn default_projections() -> usize {
    128
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            tv: true,
            w1: true,
            score_mc: default_score_mc(),
            marginal: None,
            bins: None,
            projections: default_projections(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub n: usize,
    pub density: DensityChoice,
    #[serde(default)]
    pub schedule: Schedule,
    pub capacity: Capacity,
    pub model: ModelChoice,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub sampler: SamplerSettings,
    #[serde(default)]
    pub metrics: MetricSettings,
    /// Where artifacts go; `None` keeps everything in memory.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// Hyperparameters after applying the scaling rules for the configured `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub dim: usize,
    pub d_star: usize,
    pub beta: f64,
    pub width: usize,
    pub depth: usize,
    /// Target `W·L` before rounding the width.
    pub wl: f64,
    pub window: TimeWindow,
    pub trunc_b: f64,
    /// Present for the piecewise models.
    pub grid: Option<TimeGrid>,
    /// Human-readable scaling checks, logged at run start.
    pub checks: Vec<String>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("parsing run config")
    }

    /// Loads a config, resolves relative density paths against the config
    /// location and applies the output-directory override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text)?;
        if let DensityChoice::File { path: p } = &mut cfg.density {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Ok(dir) = std::env::var(ENV_OUT_DIR) {
            if !dir.is_empty() {
                self.out_dir = Some(PathBuf::from(dir));
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing run config")
    }

    /// SHA-256 of the canonical serialization, excluding the output
    /// directory (which does not affect any number).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n >= 2, "n must be at least 2");
        if let DensityChoice::File { path } = &self.density {
            ensure!(path.exists(), "density spec {} does not exist", path.display());
        }
        ensure!(self.sampler.steps >= 1, "sampler needs at least one step");
        ensure!(self.train.batch_size >= 1, "batch size must be positive");
        if let Some(c) = self.metrics.marginal {
            ensure!(c < self.density.dim(), "marginal coordinate {c} out of range");
        }
        Ok(())
    }

    pub fn chains(&self) -> usize {
        self.sampler.chains.unwrap_or(self.n)
    }

    pub fn resolve(&self) -> Result<Resolved> {
        self.validate()?;
        let dim = self.density.dim();
        let d_star = self.density.d_star()?.max(1);
        let mut checks = Vec::new();
        let (width, depth, wl, window, beta) = match &self.capacity {
            Capacity::Fixed {
                width,
                depth,
                t_lo,
                t_hi,
            } => {
                ensure!(*width >= 1 && *depth >= 1, "width and depth must be positive");
                let w = TimeWindow::new(*t_lo, *t_hi)?;
                (*width, *depth, (width * depth) as f64, w, f64::NAN)
            }
            Capacity::Scaled {
                wl_scale,
                depth,
                beta,
                kappa_lo,
                kappa_hi,
            } => {
                ensure!(*depth >= 1 && *wl_scale > 0.0 && *beta > 0.0, "invalid scaling rule");
                let base = capacity_for(self.n, d_star, *beta);
                let wl = wl_scale * base;
                let width = (wl / *depth as f64).ceil().max(1.0) as usize;
                let window = window_for(wl, *kappa_lo, *kappa_hi)?;
                checks.push(format!(
                    "WL = {wl:.3} = {wl_scale} x n^{{d*/(2(2b+d*))}} = {wl_scale} x {base:.4} (W = {width}, L = {depth}, realized W*L = {})",
                    width * depth
                ));
                checks.push(format!(
                    "T_lo = WL^-{kappa_lo} = {:.4e}, T_hi = {kappa_hi} log WL = {:.4}",
                    window.t_lo, window.t_hi
                ));
                (width, *depth, wl, window, *beta)
            }
        };
        let grid = match &self.model {
            ModelChoice::Piecewise {
                wl_scale,
                wl_min,
                wl_max,
            } => {
                ensure!(beta.is_finite(), "the dyadic grid needs the scaled capacity rule");
                let spec = GridSpec {
                    n: self.n,
                    dim,
                    d_star,
                    beta,
                    t_lo: window.t_lo,
                    t_hi: window.t_hi,
                    wl_scale: *wl_scale,
                    wl_min: *wl_min,
                    wl_max: *wl_max,
                    depth,
                    trunc_b: self.train.trunc_b,
                };
                let g = TimeGrid::dyadic(&spec)?;
                let t1 = (self.n as f64).powf(-2.0 * d_star as f64 / (dim as f64 * (2.0 * beta + d_star as f64)));
                checks.push(format!(
                    "P = floor(log2(T_hi/T_lo)) + 1 = {}, {} intervals after merging; t_1 = {:.4e} vs n^{{-2d*/(d(2b+d*))}} = {t1:.4e}",
                    g.nominal_intervals,
                    g.len(),
                    g.boundaries.get(1).copied().unwrap_or(f64::NAN)
                ));
                let doubling = g.boundaries[1..]
                    .windows(2)
                    .all(|w| w[1] <= 2.0 * w[0] * (1.0 + 1e-12) || w[1] == window.t_hi);
                checks.push(format!("t_(j+1) = min(2 t_j, T_hi): {doubling}"));
                Some(g)
            }
            ModelChoice::PiecewiseSingle => Some(TimeGrid::single(window, width, depth, self.train.trunc_b)),
            _ => None,
        };
        if matches!(self.capacity, Capacity::Fixed { .. }) && matches!(self.model, ModelChoice::Piecewise { .. }) {
            bail!("the dyadic grid needs the scaled capacity rule");
        }
        Ok(Resolved {
            dim,
            d_star,
            beta,
            width,
            depth,
            wl,
            window,
            trunc_b: self.train.trunc_b,
            grid,
            checks,
        })
    }
}

/// Sets the global worker count from the environment, once.
pub fn init_threads_from_env() {
    if let Ok(v) = std::env::var(ENV_THREADS) {
        if let Ok(k) = v.parse::<usize>() {
            // fails only when a pool already exists, which is fine
            let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
        }
    }
}
