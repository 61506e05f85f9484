//! Euler–Maruyama discretization of the reverse SDE
//! `dY = β_{T̄−s}(Y + 2 ŝ(Y, T̄−s)) ds + sqrt(2 β_{T̄−s}) dB_s`, `Y₀ ~ N(0, I)`,
//! run from reverse time 0 to `T̄ − T̲`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::samples::Samples;
use crate::schedule::{Schedule, TimeWindow};
use crate::score::ScoreFunction;

/// Chains per random stream.
pub const CHAIN_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepGrid {
    /// Equal steps in time.
    Uniform,
    /// Refined toward small forward time. Without a ratio the forward times
    /// are log-uniform (`t_{k+1}/t_k` constant); with a ratio `r > 1`, each
    /// step (walking from `T̲` up) is `r` times longer than the previous one.
    Geometric {
        #[serde(default)]
        ratio: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub grid: StepGrid,
    pub t_lo: f64,
    pub t_hi: f64,
    pub chains: usize,
    pub seed: u64,
    /// Number of leading chains whose full paths are recorded.
    #[serde(default)]
    pub record_paths: usize,
}

impl SamplerConfig {
    pub fn new(window: TimeWindow, steps: usize, chains: usize, seed: u64) -> Self {
        Self {
            steps,
            grid: StepGrid::Geometric { ratio: None },
            t_lo: window.t_lo,
            t_hi: window.t_hi,
            chains,
            seed,
            record_paths: 0,
        }
    }

    /// Forward times visited, from `T̄` down to `T̲` (`steps + 1` values).
    pub fn forward_times(&self) -> Result<Vec<f64>> {
        let w = TimeWindow::new(self.t_lo, self.t_hi)?;
        if self.steps == 0 {
            return Err(Error::Domain("sampler needs at least one step".into()));
        }
        let n = self.steps;
        let mut t: Vec<f64> = match self.grid {
            StepGrid::Uniform => (0..=n).map(|k| w.t_hi - w.width() * k as f64 / n as f64).collect(),
            StepGrid::Geometric { ratio: None } => {
                let r = (w.t_lo / w.t_hi).ln();
                (0..=n).map(|k| w.t_hi * (r * k as f64 / n as f64).exp()).collect()
            }
            StepGrid::Geometric { ratio: Some(q) } => {
                if !(q > 0.0) {
                    return Err(Error::Domain("geometric ratio must be positive".into()));
                }
                // step j (from the T̲ end) has length h q^j
                let total: f64 = if (q - 1.0).abs() < 1e-12 {
                    n as f64
                } else {
                    (q.powi(n as i32) - 1.0) / (q - 1.0)
                };
                let h = w.width() / total;
                let mut acc = w.t_lo;
                let mut up = vec![w.t_lo];
                for j in 0..n {
                    acc += h * q.powi(j as i32);
                    up.push(acc);
                }
                up.reverse();
                up
            }
        };
        t[0] = w.t_hi;
        t[n] = w.t_lo;
        Ok(t)
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Terminal states, one row per chain.
    pub samples: Samples,
    /// Recorded paths (`steps + 1` rows each) of the first `record_paths` chains.
    pub paths: Vec<Samples>,
    /// Forward times of the grid, `T̄` first.
    pub forward_times: Vec<f64>,
}

impl SampleOutput {
    /// Fraction of chains ending outside `[-1.5, 1.5]^d`.
    pub fn outside_fraction(&self) -> f64 {
        self.samples.fraction_outside(1.5)
    }
}

/// Simulates `config.chains` independent reverse chains.
pub fn reverse_sample<S: ScoreFunction + ?Sized>(
    score: &S,
    schedule: &Schedule,
    config: &SamplerConfig,
) -> Result<SampleOutput> {
    if config.chains == 0 {
        return Err(Error::Domain("need at least one chain".into()));
    }
    let times = config.forward_times()?;
    let d = score.dim();
    let blocks = config.chains.div_ceil(CHAIN_BLOCK);
    let results: Vec<(Vec<f64>, Vec<Samples>)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let first = b * CHAIN_BLOCK;
            let count = CHAIN_BLOCK.min(config.chains - first);
            let record = config.record_paths.saturating_sub(first).min(count);
            run_block(score, schedule, &times, d, count, record, config.seed, b as u64)
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(config.chains * d);
    let mut paths = Vec::new();
    for (block, p) in results {
        data.extend(block);
        paths.extend(p);
    }
    Ok(SampleOutput {
        samples: Samples::new(d, data)?,
        paths,
        forward_times: times,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_block<S: ScoreFunction + ?Sized>(
    score: &S,
    schedule: &Schedule,
    times: &[f64],
    d: usize,
    count: usize,
    record: usize,
    seed: u64,
    block: u64,
) -> Result<(Vec<f64>, Vec<Samples>)> {
    let mut rng = stream(seed, block);
    let mut y: Vec<f64> = (0..count * d).map(|_| rng.sample(StandardNormal)).collect();
    let mut paths: Vec<Samples> = (0..record)
        .map(|c| {
            let mut s = Samples::with_capacity(d, times.len());
            s.push_row(&y[c * d..(c + 1) * d]);
            s
        })
        .collect();
    let mut s = vec![0.0; d];
    for (k, w) in times.windows(2).enumerate() {
        let (t, h) = (w[0], w[0] - w[1]);
        let beta = schedule.beta(t);
        let noise = (2.0 * beta * h).sqrt();
        for c in 0..count {
            let row = &mut y[c * d..(c + 1) * d];
            score.score_into(row, t, &mut s)?;
            for (yi, si) in row.iter_mut().zip(&s) {
                let z: f64 = rng.sample(StandardNormal);
                *yi += h * beta * (*yi + 2.0 * si) + noise * z;
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp { step: k + 1 });
            }
        }
        for (c, p) in paths.iter_mut().enumerate() {
            p.push_row(&y[c * d..(c + 1) * d]);
        }
    }
    Ok((y, paths))
}
