//! Denoising score matching with `λ ≡ 1`:
//! `(1/n) Σ_i E_{t ~ Unif(T̲, T̄)} E_{X_t ~ p_{t|0}(·|X_{0,i})} ‖s(X_t, t) − ∇ log p_{t|0}(X_t | X_{0,i})‖²`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Encoding, Gradient, ScoreNetwork, DEFAULT_TRUNC_B};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, stream};
use crate::samples::Samples;
use crate::schedule::{Schedule, TimeWindow};
use crate::score::ScoreFunction;

/// How diffusion times are drawn for each data point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeSampling {
    /// Independent `Unif(T̲, T̄)` draws.
    Uniform(TimeWindow),
    /// Equal-count strata over the window, randomly assigned to draws.
    Stratified(TimeWindow),
    /// Every draw at one time.
    Fixed(f64),
    /// A fixed share of the draws log-uniform on the window, the rest
    /// uniform, both stratified. Each draw carries the weight
    /// `u(t)/q(t)` of the uniform density over the mixture density, so
    /// weighted averages estimate the same uniform-in-time objective.
    Mixture { window: TimeWindow, log_fraction: f64 },
}

/// How training draws times; see [`TimeSampling`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimeDraws {
    #[default]
    Stratified,
    Mixture {
        log_fraction: f64,
    },
}

impl TimeDraws {
    pub fn sampling(self, window: TimeWindow) -> TimeSampling {
        match self {
            TimeDraws::Stratified => TimeSampling::Stratified(window),
            TimeDraws::Mixture { log_fraction } => TimeSampling::Mixture { window, log_fraction },
        }
    }
}

/// Shared randomness for the denoising objective: perturbed points and
/// their regression targets `−(X_t − m_t X₀)/σ_t²`.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmDraws {
    pub t: Vec<f64>,
    pub xt: Samples,
    pub target: Samples,
    /// Importance weights; `None` means all ones.
    pub weight: Option<Vec<f64>>,
}

impl DsmDraws {
    /// `per_point` draws for every row of `data`, in row order.
    pub fn generate<R: Rng + ?Sized>(
        data: &Samples,
        schedule: &Schedule,
        sampling: TimeSampling,
        per_point: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let total = data.len() * per_point;
        let d = data.dim();
        if let TimeSampling::Mixture { log_fraction, .. } = sampling {
            if !(0.0..1.0).contains(&log_fraction) {
                return Err(Error::Domain("log-uniform share must lie in [0, 1)".into()));
            }
        }
        let mut t = draw_times(sampling, total, rng);
        if matches!(sampling, TimeSampling::Stratified(_) | TimeSampling::Mixture { .. }) {
            t.shuffle(rng);
        }
        let weight = match sampling {
            TimeSampling::Mixture { window, log_fraction } => {
                let n_log = (log_fraction * total as f64).floor() / total.max(1) as f64;
                let span = (window.t_hi / window.t_lo).ln();
                Some(
                    t.iter()
                        .map(|&tk| {
                            let u = 1.0 / window.width();
                            u / ((1.0 - n_log) * u + n_log / (tk * span))
                        })
                        .collect(),
                )
            }
            _ => None,
        };
        let mut xt = Samples::with_capacity(d, total);
        let mut target = Samples::with_capacity(d, total);
        let mut x = vec![0.0; d];
        let mut g = vec![0.0; d];
        for (k, &tk) in t.iter().enumerate() {
            let x0 = data.row(k / per_point);
            let (m, sigma) = schedule.m_sigma(tk)?;
            if sigma == 0.0 {
                return Err(Error::Singularity("score matching needs t > 0".into()));
            }
            for i in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                x[i] = m * x0[i] + sigma * z;
                g[i] = -(x[i] - m * x0[i]) / (sigma * sigma);
            }
            xt.push_row(&x);
            target.push_row(&g);
        }
        Ok(Self { t, xt, target, weight })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

fn draw_times<R: Rng + ?Sized>(sampling: TimeSampling, n: usize, rng: &mut R) -> Vec<f64> {
    match sampling {
        TimeSampling::Fixed(t) => vec![t; n],
        TimeSampling::Uniform(w) => (0..n).map(|_| w.t_lo + w.width() * rng.random::<f64>()).collect(),
        TimeSampling::Stratified(w) => (0..n)
            .map(|k| {
                let u: f64 = rng.random();
                (w.t_lo + w.width() * (k as f64 + u) / n as f64).min(w.t_hi)
            })
            .collect(),
        TimeSampling::Mixture {
            window: w,
            log_fraction,
        } => {
            let n_log = (log_fraction * n as f64).floor() as usize;
            let mut t = draw_times(TimeSampling::Stratified(w), n - n_log, rng);
            let span = (w.t_hi / w.t_lo).ln();
            t.extend((0..n_log).map(|k| {
                let u: f64 = rng.random();
                (w.t_lo * (span * (k as f64 + u) / n_log as f64).exp()).clamp(w.t_lo, w.t_hi)
            }));
            t
        }
    }
}

/// Monte Carlo mean with standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Per-draw squared errors `‖s(X_t, t) − target‖²`, times the draw weight.
pub fn dsm_errors<S: ScoreFunction + ?Sized>(score: &S, draws: &DsmDraws) -> Result<Vec<f64>> {
    let d = draws.xt.dim();
    let idx: Vec<usize> = (0..draws.len()).collect();
    let parts = idx
        .par_chunks(512)
        .map(|chunk| -> Result<Vec<f64>> {
            let mut s = vec![0.0; d];
            chunk
                .iter()
                .map(|&k| {
                    score.score_into(draws.xt.row(k), draws.t[k], &mut s)?;
                    let w = draws.weight.as_ref().map_or(1.0, |w| w[k]);
                    Ok(w * s
                        .iter()
                        .zip(draws.target.row(k))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>())
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

pub fn mean_with_se(v: &[f64]) -> LossEstimate {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    LossEstimate {
        mean,
        std_err: (var / n).sqrt(),
    }
}

/// Score-matching loss on pre-drawn randomness.
pub fn dsm_loss<S: ScoreFunction + ?Sized>(score: &S, draws: &DsmDraws) -> Result<LossEstimate> {
    if draws.is_empty() {
        return Err(Error::Domain("no draws".into()));
    }
    Ok(mean_with_se(&dsm_errors(score, draws)?))
}

/// Unbiased Monte Carlo estimate of the score-matching loss with
/// `mc_time_draws` uniform times per data point.
pub fn sm_loss<S: ScoreFunction + ?Sized>(
    score: &S,
    data: &Samples,
    schedule: &Schedule,
    window: TimeWindow,
    mc_time_draws: usize,
    seed: u64,
) -> Result<LossEstimate> {
    let mut rng = stream(seed, 0);
    let draws = DsmDraws::generate(data, schedule, TimeSampling::Uniform(window), mc_time_draws, &mut rng)?;
    dsm_loss(score, &draws)
}

/// Network capacity `W·L = n^{d*/(2(2β+d*))}` for sample size `n`.
pub fn capacity_for(n: usize, d_star: usize, beta: f64) -> f64 {
    let ds = d_star as f64;
    (n as f64).powf(ds / (2.0 * (2.0 * beta + ds)))
}

/// `T̲ = (W L)^{-κ_lo}`, `T̄ = κ_hi log(W L)`.
pub fn window_for(wl: f64, kappa_lo: f64, kappa_hi: f64) -> Result<TimeWindow> {
    if !(wl > 1.0) {
        return Err(Error::Domain(format!(
            "W·L must exceed 1 to define the window, got {wl}"
        )));
    }
    TimeWindow::new(wl.powf(-kappa_lo), kappa_hi * wl.ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub width: usize,
    pub depth: usize,
    #[serde(default = "default_trunc_b")]
    pub trunc_b: f64,
    pub t_lo: f64,
    pub t_hi: f64,
    /// Time draws per data point in each minibatch.
    #[serde(default = "one")]
    pub mc_time_draws: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Cosine decay of the learning rate down to this fraction of `lr`.
    #[serde(default = "default_final_lr")]
    pub final_lr_fraction: f64,
    pub steps: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Fixed noise draws per validation point.
    #[serde(default = "default_val_draws")]
    pub val_draws: usize,
    /// Time draws for minibatches and validation.
    #[serde(default)]
    pub time_draws: TimeDraws,
    #[serde(default)]
    pub encoding: Encoding,
    pub seed: u64,
}

fn default_trunc_b() -> f64 {
    DEFAULT_TRUNC_B
}
fn one() -> usize {
    1
}
fn default_final_lr() -> f64 {
    0.1
}
fn default_eval_every() -> usize {
    100
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_val_draws() -> usize {
    8
}

impl TrainPlan {
    pub fn new(width: usize, depth: usize, window: TimeWindow, batch_size: usize, steps: usize, seed: u64) -> Self {
        Self {
            width,
            depth,
            trunc_b: DEFAULT_TRUNC_B,
            t_lo: window.t_lo,
            t_hi: window.t_hi,
            mc_time_draws: 1,
            batch_size,
            adam: AdamConfig::default(),
            final_lr_fraction: default_final_lr(),
            steps,
            eval_every: default_eval_every(),
            val_fraction: default_val_fraction(),
            val_draws: default_val_draws(),
            time_draws: TimeDraws::default(),
            encoding: Encoding::RAW,
            seed,
        }
    }

    pub fn window(&self) -> Result<TimeWindow> {
        TimeWindow::new(self.t_lo, self.t_hi)
    }

    fn validate(&self, data: &Samples) -> Result<()> {
        self.window()?;
        if self.width == 0 || self.depth == 0 || self.batch_size == 0 || self.mc_time_draws == 0 {
            return Err(Error::Domain(
                "width, depth, batch size and time draws must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Domain("validation fraction must lie in [0, 1)".into()));
        }
        if data.len() < 2 {
            return Err(Error::Domain("need at least two data points".into()));
        }
        if data.as_slice().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Domain("training data must lie in [-1, 1]^d".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ScoreNetwork,
    pub log: Vec<TrainLogRow>,
    pub best_step: usize,
    pub best_val: f64,
}

impl TrainOutcome {
    /// Whether the 10-step moving average of the logged train loss never
    /// increases over the first half of the log.
    pub fn first_half_monotone(&self) -> bool {
        let losses: Vec<f64> = self.log.iter().skip(1).map(|r| r.train_loss).collect();
        let half = &losses[..losses.len() / 2];
        if half.len() < 11 {
            return true;
        }
        let avg: Vec<f64> = half.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
        avg.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Approximate empirical risk minimizer over the truncated ReLU class:
/// Adam on fresh denoising draws, keeping the snapshot with the lowest
/// validation loss (10% of the data held out with fixed draws).
pub fn train(plan: &TrainPlan, schedule: &Schedule, data: &Samples) -> Result<TrainOutcome> {
    train_on_window(plan, schedule, data, plan.window()?)
}

fn train_on_window(plan: &TrainPlan, schedule: &Schedule, data: &Samples, window: TimeWindow) -> Result<TrainOutcome> {
    plan.validate(data)?;
    let start = Instant::now();
    let seed = plan.seed;
    let mut net = ScoreNetwork::init_encoded(
        data.dim(),
        plan.width,
        plan.depth,
        plan.trunc_b,
        schedule.clone(),
        plan.encoding,
        derive_seed(seed, 10),
    )?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream(seed, 1));
    let n_val = ((data.len() as f64 * plan.val_fraction).round() as usize).min(data.len() - 1);
    let val = data.select_rows(&order[..n_val]);
    let fit = data.select_rows(&order[n_val..]);
    let val_draws = if n_val > 0 {
        Some(DsmDraws::generate(
            &val,
            schedule,
            plan.time_draws.sampling(window),
            plan.val_draws,
            &mut stream(seed, 3),
        )?)
    } else {
        None
    };
    let val_loss = |net: &ScoreNetwork| -> Result<f64> {
        match &val_draws {
            Some(d) => Ok(dsm_loss(net, d)?.mean),
            None => Ok(f64::NAN),
        }
    };

    let mut best = net.clone();
    let mut best_val = val_loss(&net)?;
    let mut best_step = 0;
    let mut log = vec![TrainLogRow {
        step: 0,
        train_loss: f64::NAN,
        val_loss: best_val,
        wall_ms: start.elapsed().as_millis(),
    }];
    let mut adam = Adam::new(plan.adam, net.num_params());
    let mut rng = stream(seed, 2);
    let mut grad = Gradient::zeros_like(&net);
    let mut running = 0.0;
    let mut running_n = 0usize;
    for step in 1..=plan.steps {
        let idx: Vec<usize> = (0..plan.batch_size).map(|_| rng.random_range(0..fit.len())).collect();
        let batch = fit.select_rows(&idx);
        let draws = DsmDraws::generate(
            &batch,
            schedule,
            plan.time_draws.sampling(window),
            plan.mc_time_draws,
            &mut rng,
        )?;
        grad.data.fill(0.0);
        grad.count = 0;
        let loss = net.backward_weighted(&draws.xt, &draws.t, &draws.target, draws.weight.as_deref(), &mut grad)?;
        if !loss.is_finite() || grad.data.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training { step, loss });
        }
        let progress = (step - 1) as f64 / plan.steps.max(1) as f64;
        let lr_scale = plan.final_lr_fraction
            + (1.0 - plan.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        adam.update(net.params_mut(), &grad.data, lr_scale);
        if net.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Training { step, loss: f64::NAN });
        }
        running += loss;
        running_n += 1;
        if step % plan.eval_every.max(1) == 0 || step == plan.steps {
            let v = val_loss(&net)?;
            if !v.is_finite() && val_draws.is_some() {
                return Err(Error::Training { step, loss: v });
            }
            if v < best_val || val_draws.is_none() {
                best_val = v;
                best = net.clone();
                best_step = step;
            }
            log.push(TrainLogRow {
                step,
                train_loss: running / running_n as f64,
                val_loss: v,
                wall_ms: start.elapsed().as_millis(),
            });
            running = 0.0;
            running_n = 0;
        }
    }
    Ok(TrainOutcome {
        net: best,
        log,
        best_step,
        best_val,
    })
}

/// Dyadic time grid `T̲ = t₀ < t₁ < … < t_P = T̄` with per-interval capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub boundaries: Vec<f64>,
    /// `(W_j, L_j)` for interval `j` (between boundaries `j` and `j+1`).
    pub capacities: Vec<(usize, usize)>,
    pub trunc_b: Vec<f64>,
    /// `⌊log₂(T̄/T̲)⌋ + 1`, before dropping zero-length intervals.
    pub nominal_intervals: usize,
}

/// Inputs to the dyadic grid construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub dim: usize,
    pub d_star: usize,
    pub beta: f64,
    pub t_lo: f64,
    pub t_hi: f64,
    /// `W_j L_j = wl_scale · t_{j}^{-d/4}`, clamped to `[wl_min, wl_max]`.
    pub wl_scale: f64,
    pub wl_min: f64,
    pub wl_max: f64,
    pub depth: usize,
    pub trunc_b: f64,
}

impl TimeGrid {
    /// Grid with `t₁ = n^{−2d*/(d(2β+d*))}` and `t_{j+1} = min(2 t_j, T̄)`.
    pub fn dyadic(spec: &GridSpec) -> Result<Self> {
        let w = TimeWindow::new(spec.t_lo, spec.t_hi)?;
        if spec.depth == 0 || spec.dim == 0 || spec.d_star == 0 || spec.d_star > spec.dim {
            return Err(Error::Domain("invalid grid dimensions".into()));
        }
        let p = ((w.t_hi / w.t_lo).log2().floor() as usize) + 1;
        let (ds, d) = (spec.d_star as f64, spec.dim as f64);
        let t1 = (spec.n as f64).powf(-2.0 * ds / (d * (2.0 * spec.beta + ds)));
        let mut b = vec![w.t_lo];
        let mut cur = t1.clamp(w.t_lo, w.t_hi);
        for _ in 1..p {
            b.push(cur);
            cur = (2.0 * cur).min(w.t_hi);
        }
        b.push(w.t_hi);
        *b.last_mut().unwrap() = w.t_hi;
        b.dedup_by(|a, c| a <= c);
        let mut grid = Self::from_boundaries(b, spec.depth, spec.trunc_b)?;
        grid.nominal_intervals = p;
        for j in 0..grid.len() {
            let tj = grid.boundaries[j];
            let wl = (spec.wl_scale * tj.powf(-d / 4.0)).clamp(spec.wl_min, spec.wl_max);
            let width = (wl / spec.depth as f64).ceil().max(1.0) as usize;
            grid.capacities[j] = (width, spec.depth);
        }
        Ok(grid)
    }

    /// Grid with explicit boundaries; capacities default to zero width and
    /// must be filled in by the caller.
    pub fn from_boundaries(boundaries: Vec<f64>, depth: usize, trunc_b: f64) -> Result<Self> {
        if boundaries.len() < 2 || boundaries.windows(2).any(|w| !(w[0] < w[1])) || !(boundaries[0] > 0.0) {
            return Err(Error::Domain(
                "grid boundaries must be positive and strictly increasing".into(),
            ));
        }
        let k = boundaries.len() - 1;
        Ok(Self {
            boundaries,
            capacities: vec![(0, depth); k],
            trunc_b: vec![trunc_b; k],
            nominal_intervals: k,
        })
    }

    /// The degenerate one-interval grid.
    pub fn single(window: TimeWindow, width: usize, depth: usize, trunc_b: f64) -> Self {
        Self {
            boundaries: vec![window.t_lo, window.t_hi],
            capacities: vec![(width, depth)],
            trunc_b: vec![trunc_b],
            nominal_intervals: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn t_lo(&self) -> f64 {
        self.boundaries[0]
    }

    pub fn t_hi(&self) -> f64 {
        *self.boundaries.last().unwrap()
    }

    /// Interval holding `t`: `[t_j, t_{j+1})`, with `T̄` in the last one.
    /// Times outside the grid go to the nearest end interval.
    pub fn interval_of(&self, t: f64) -> usize {
        let k = self.boundaries.partition_point(|&b| b <= t);
        k.saturating_sub(1).min(self.len() - 1)
    }

    pub fn interval(&self, j: usize) -> Result<TimeWindow> {
        TimeWindow::new(self.boundaries[j], self.boundaries[j + 1])
    }
}

/// Piecewise estimator: one network per grid interval.
#[derive(Debug, Clone)]
pub struct PiecewiseScore {
    pub grid: TimeGrid,
    pub nets: Vec<ScoreNetwork>,
}

impl PiecewiseScore {
    pub fn new(grid: TimeGrid, nets: Vec<ScoreNetwork>) -> Result<Self> {
        if nets.len() != grid.len() || nets.is_empty() {
            return Err(Error::Shape("one network per interval is required".into()));
        }
        let d = nets[0].dim();
        if nets.iter().any(|n| n.dim() != d) {
            return Err(Error::Shape("all networks must share the dimension".into()));
        }
        Ok(Self { grid, nets })
    }
}

impl ScoreFunction for PiecewiseScore {
    fn dim(&self) -> usize {
        self.nets[0].dim()
    }

    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.nets[self.grid.interval_of(t)].forward_into(x, t, out)
    }
}

/// Trains one network per interval; interval `j` uses seed `plan.seed + j`
/// and the capacity recorded in the grid. With one interval this is
/// [`train`] on the whole window.
pub fn train_piecewise(
    grid: &TimeGrid,
    plan: &TrainPlan,
    schedule: &Schedule,
    data: &Samples,
) -> Result<(PiecewiseScore, Vec<TrainOutcome>)> {
    let outcomes = (0..grid.len())
        .into_par_iter()
        .map(|j| {
            let mut p = plan.clone();
            p.width = grid.capacities[j].0;
            p.depth = grid.capacities[j].1;
            p.trunc_b = grid.trunc_b[j];
            p.seed = plan.seed.wrapping_add(j as u64);
            let w = grid.interval(j)?;
            p.t_lo = w.t_lo;
            p.t_hi = w.t_hi;
            train_on_window(&p, schedule, data, w)
        })
        .collect::<Result<Vec<_>>>()?;
    let nets = outcomes.iter().map(|o| o.net.clone()).collect();
    Ok((PiecewiseScore::new(grid.clone(), nets)?, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::InteractionDensity;
    use crate::oracle::{score_l2_error, DiffusedOracle};
    use crate::score::{FnScore, ZeroScore};

    fn uniform_data(n: usize, seed: u64) -> Samples {
        InteractionDensity::uniform(1).unwrap().sample(n, seed).unwrap()
    }

    #[test]
    fn targets_equal_conditional_score() {
        let s = Schedule::constant(1.0);
        let data = uniform_data(50, 1);
        let w = TimeWindow::new(0.01, 2.0).unwrap();
        let draws = DsmDraws::generate(&data, &s, TimeSampling::Uniform(w), 3, &mut stream(4, 0)).unwrap();
        for k in 0..draws.len() {
            let g = s
                .conditional_score(draws.xt.row(k), data.row(k / 3), draws.t[k])
                .unwrap();
            assert_eq!(g, draws.target.row(k));
        }
    }

    #[test]
    fn zero_net_loss_matches_chi_square_mean() {
        // E‖(X_t − m X₀)/σ²‖² = d/σ² at a fixed time
        let s = Schedule::constant(1.0);
        let data = InteractionDensity::uniform(2).unwrap().sample(20_000, 3).unwrap();
        let t = 0.3;
        let (_, sig) = s.m_sigma(t).unwrap();
        let draws = DsmDraws::generate(&data, &s, TimeSampling::Fixed(t), 1, &mut stream(5, 0)).unwrap();
        let e = dsm_loss(&ZeroScore(2), &draws).unwrap();
        let want = 2.0 / (sig * sig);
        assert!((e.mean - want).abs() < 3.0 * e.std_err, "{} vs {want}", e.mean);
    }

    #[test]
    fn matched_target_gives_zero_loss() {
        let s = Schedule::constant(1.0);
        let x0 = [0.4];
        let data = Samples::new(1, x0.to_vec()).unwrap();
        let t = 0.2;
        let draws = DsmDraws::generate(&data, &s, TimeSampling::Fixed(t), 100, &mut stream(6, 0)).unwrap();
        let sched = s.clone();
        let target = FnScore::new(1, move |x: &[f64], t: f64, out: &mut [f64]| {
            sched.conditional_score_into(x, &x0, t, out).unwrap();
        });
        assert_eq!(dsm_loss(&target, &draws).unwrap().mean, 0.0);
    }

    #[test]
    fn oracle_beats_zero_on_shared_draws() {
        let s = Schedule::constant(1.0);
        let data = uniform_data(5000, 7);
        let w = TimeWindow::new(0.05, 3.0).unwrap();
        let draws = DsmDraws::generate(&data, &s, TimeSampling::Uniform(w), 1, &mut stream(8, 0)).unwrap();
        let oracle = DiffusedOracle::new(InteractionDensity::uniform(1).unwrap(), s.clone()).unwrap();
        let a = dsm_loss(&oracle, &draws).unwrap().mean;
        let z = dsm_loss(&ZeroScore(1), &draws).unwrap().mean;
        assert!(a < z);
    }

    #[test]
    fn capacity_and_window_scaling() {
        assert!((capacity_for(1 << 12, 1, 1.0) - 2f64.powf(2.0)).abs() < 1e-12);
        let w = window_for(8.0, 6.0, 1.0).unwrap();
        assert!((w.t_lo - 8f64.powi(-6)).abs() < 1e-20);
        assert!((w.t_hi - 8f64.ln()).abs() < 1e-15);
        assert!(window_for(1.0, 6.0, 1.0).is_err());
    }

    fn small_plan(steps: usize) -> TrainPlan {
        let mut p = TrainPlan::new(16, 2, TimeWindow::new(1e-3, 3.0).unwrap(), 128, steps, 11);
        p.eval_every = 50;
        p.adam.lr = 3e-3;
        p
    }

    #[test]
    fn zero_budget_returns_init() {
        let data = uniform_data(200, 1);
        let s = Schedule::constant(1.0);
        let out = train(&small_plan(0), &s, &data).unwrap();
        let init = ScoreNetwork::init(1, 16, 2, DEFAULT_TRUNC_B, s, derive_seed(11, 10)).unwrap();
        assert_eq!(out.net, init);
        assert_eq!(out.best_step, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let data = uniform_data(500, 2);
        let s = Schedule::constant(1.0);
        let a = train(&small_plan(60), &s, &data).unwrap();
        let b = train(&small_plan(60), &s, &data).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.best_step, b.best_step);
    }

    #[test]
    fn rejects_data_outside_cube() {
        let data = Samples::new(1, vec![0.0, 1.5, 0.2]).unwrap();
        assert!(train(&small_plan(1), &Schedule::constant(1.0), &data).is_err());
    }

    #[test]
    fn training_reduces_score_error() {
        let data = uniform_data(1 << 14, 3);
        let s = Schedule::constant(1.0);
        let mut plan = small_plan(1500);
        plan.width = 32;
        plan.depth = 3;
        let out = train(&plan, &s, &data).unwrap();
        let oracle = DiffusedOracle::new(InteractionDensity::uniform(1).unwrap(), s.clone()).unwrap();
        let t = s.time_for_sigma(0.5).unwrap();
        let trained = score_l2_error(&out.net, &oracle, t, 20_000, 1).unwrap();
        let zero = score_l2_error(&ZeroScore(1), &oracle, t, 20_000, 1).unwrap();
        assert!(
            trained.value * 5.0 <= zero.value,
            "trained {} zero {}",
            trained.value,
            zero.value
        );
    }

    #[test]
    fn dyadic_grid_follows_doubling() {
        let spec = GridSpec {
            n: 1 << 12,
            dim: 2,
            d_star: 1,
            beta: 1.0,
            t_lo: 1e-3,
            t_hi: 2.0,
            wl_scale: 8.0,
            wl_min: 4.0,
            wl_max: 64.0,
            depth: 2,
            trunc_b: 10.0,
        };
        let g = TimeGrid::dyadic(&spec).unwrap();
        let p = ((2.0f64 / 1e-3).log2().floor() as usize) + 1;
        assert_eq!(g.nominal_intervals, p);
        let t1 = (4096f64).powf(-2.0 / (2.0 * 3.0));
        assert!((g.boundaries[1] - t1).abs() < 1e-15);
        for w in g.boundaries[1..].windows(2) {
            assert!(w[1] == (2.0 * w[0]).min(2.0) || w[1] == 2.0);
        }
        assert_eq!(*g.boundaries.last().unwrap(), 2.0);
        // capacity shrinks with t
        assert!(g.capacities.windows(2).all(|c| c[0].0 >= c[1].0));
    }

    #[test]
    fn interval_dispatch_is_left_closed() {
        let g = TimeGrid::from_boundaries(vec![0.1, 0.2, 0.4, 0.8], 1, 10.0).unwrap();
        assert_eq!(g.interval_of(0.1), 0);
        assert_eq!(g.interval_of(0.2), 1);
        assert_eq!(g.interval_of(0.39999), 1);
        assert_eq!(g.interval_of(0.4), 2);
        assert_eq!(g.interval_of(0.8), 2);
        assert_eq!(g.interval_of(0.05), 0);
    }

    #[test]
    fn single_interval_piecewise_equals_train() {
        let data = uniform_data(400, 9);
        let s = Schedule::constant(1.0);
        let plan = small_plan(40);
        let grid = TimeGrid::single(plan.window().unwrap(), plan.width, plan.depth, plan.trunc_b);
        let (pw, _) = train_piecewise(&grid, &plan, &s, &data).unwrap();
        let global = train(&plan, &s, &data).unwrap();
        assert_eq!(pw.nets[0], global.net);
    }
}
