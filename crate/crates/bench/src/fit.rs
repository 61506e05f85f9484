//! Least-squares slope fits on log-log data.

use anyhow::{ensure, Result};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; infinite with two points.
    pub std_err: f64,
    /// 95% confidence interval from the Student t quantile with `points − 2`
    /// degrees of freedom.
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub points: usize,
}

impl SlopeFit {
    pub fn contains(&self, value: f64) -> bool {
        self.ci_lo <= value && value <= self.ci_hi
    }
}

/// Ordinary least squares of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<SlopeFit> {
    ensure!(x.len() == y.len(), "x and y differ in length");
    ensure!(x.len() >= 2, "need at least two points");
    ensure!(x.iter().chain(y).all(|v| v.is_finite()), "non-finite fit input");
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    ensure!(sxx > 0.0, "x values are all equal");
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let (std_err, half) = if x.len() > 2 {
        let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        let df = n - 2.0;
        let se = (rss / df / sxx).sqrt();
        let q = StudentsT::new(0.0, 1.0, df).expect("valid t").inverse_cdf(0.975);
        (se, q * se)
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    Ok(SlopeFit {
        slope,
        intercept,
        std_err,
        ci_lo: slope - half,
        ci_hi: slope + half,
        points: x.len(),
    })
}

/// Fit of `ln y` against `ln x`.
pub fn log_log_fit(x: &[f64], y: &[f64]) -> Result<SlopeFit> {
    ensure!(x.iter().chain(y).all(|v| *v > 0.0), "log-log fit needs positive values");
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly)
}

pub fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
    if s.is_empty() {
        return f64::NAN;
    }
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}
