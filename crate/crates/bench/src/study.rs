//! Rate studies over sample sizes and adaptivity studies over ambient
//! dimension.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Mutex;

use anyhow::{bail, ensure, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Capacity, DensityChoice, RunConfig};
use crate::fit::{log_log_fit, median};
use crate::pipeline::run_end_to_end;
use crate::report::{append_records, MetricFit, RateRecord};

/// Runs needed per sample size for a study to be reported.
pub const MIN_RUNS_PER_N: usize = 3;

#[derive(Debug, Clone, Default)]
pub struct StudyOptions {
    /// Metrics to fit; defaults to histogram TV and W1.
    pub metrics: Vec<String>,
    /// Acceptance band on the fitted slope of the first metric.
    pub band: Option<(f64, f64)>,
    /// CSV file receiving each record as soon as its cell finishes.
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub n: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct RateStudyReport {
    pub records: Vec<RateRecord>,
    pub failures: Vec<CellFailure>,
    pub n_list: Vec<usize>,
    /// Per metric, the median over seeds for each entry of `n_list`.
    pub medians: BTreeMap<String, Vec<f64>>,
    pub fits: Vec<MetricFit>,
}

/// Reference slope of a metric under the scaling theory, if there is one.
pub fn target_slope(metric: &str, d: usize, d_star: usize, beta: f64) -> Option<f64> {
    let (d, ds) = (d as f64, d_star as f64);
    match metric {
        "tv_value" | "tv_clipped" => Some(-beta / (2.0 * beta + ds)),
        "w1_value" if d == 1.0 => Some(-0.5),
        "w1_value" => Some(-(beta + ds / d) / (2.0 * beta + ds)),
        _ => None,
    }
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// Least-squares fit of `ln(metric)` on `ln(n)` over all records, with the
/// medians over seeds, the target check and the band verdict. Without a
/// band the verdict is whether the target lies in the 95% interval.
pub fn fit_metric(
    records: &[RateRecord],
    metric: &str,
    target: Option<f64>,
    band: Option<(f64, f64)>,
) -> Result<(MetricFit, Vec<f64>)> {
    let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for r in records {
        if let Some(v) = r.metric(metric) {
            by_n.entry(r.n).or_default().push(v);
            x.push(r.n as f64);
            y.push(v);
        }
    }
    ensure!(
        by_n.len() >= 2,
        "metric {metric} has values at fewer than two sample sizes"
    );
    let fit = log_log_fit(&x, &y)?;
    let medians: Vec<f64> = by_n.values().map(|v| median(v)).collect();
    let decreasing = strictly_decreasing(&medians);
    let target_in_ci = target.is_some_and(|t| fit.contains(t));
    let pass = match band {
        Some((lo, hi)) => decreasing && (lo..=hi).contains(&fit.slope),
        None => decreasing && target_in_ci,
    };
    Ok((
        MetricFit {
            metric: metric.into(),
            fit,
            target,
            target_in_ci,
            band,
            medians_decreasing: decreasing,
            pass,
        },
        medians,
    ))
}

fn check_geometric(n_list: &[usize]) -> Result<()> {
    ensure!(n_list.len() >= 4, "a rate study needs at least four sample sizes");
    ensure!(n_list.iter().all(|&n| n >= 2), "sample sizes must be at least 2");
    let r = n_list[1] as f64 / n_list[0] as f64;
    ensure!(r > 1.0, "sample sizes must increase");
    for w in n_list.windows(2) {
        let q = w[1] as f64 / w[0] as f64;
        ensure!(
            (q / r - 1.0).abs() < 1e-9,
            "sample sizes must form a geometric sequence"
        );
    }
    Ok(())
}

/// Runs every `(n, seed)` cell of `base` (cells in parallel, each
/// deterministic), then fits the error rates.
pub fn run_rate_study(
    base: &RunConfig,
    n_list: &[usize],
    seeds: &[u64],
    opts: &StudyOptions,
) -> Result<RateStudyReport> {
    check_geometric(n_list)?;
    ensure!(
        matches!(base.capacity, Capacity::Scaled { .. }),
        "a rate study rescales capacity with n; use the scaled capacity rule"
    );
    ensure!(seeds.len() >= MIN_RUNS_PER_N, "need at least {MIN_RUNS_PER_N} seeds");
    let cells: Vec<(usize, u64)> = n_list
        .iter()
        .flat_map(|&n| seeds.iter().map(move |&s| (n, s)))
        .collect();
    let sink = Mutex::new(());
    let results: Vec<std::result::Result<RateRecord, CellFailure>> = cells
        .par_iter()
        .map(|&(n, seed)| {
            let mut cfg = base.clone();
            cfg.n = n;
            cfg.seed = seed;
            match run_end_to_end(&cfg) {
                Ok(out) => {
                    if let Some(path) = &opts.csv {
                        let _guard = sink.lock().expect("csv writer lock");
                        if let Err(e) = append_records(path, std::slice::from_ref(&out.record)) {
                            return Err(CellFailure {
                                n,
                                seed,
                                error: format!("{e:#}"),
                            });
                        }
                    }
                    Ok(out.record)
                }
                Err(e) => Err(CellFailure {
                    n,
                    seed,
                    error: format!("{e:#}"),
                }),
            }
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(f) => failures.push(f),
        }
    }
    for &n in n_list {
        let ok = records.iter().filter(|r| r.n == n).count();
        if ok < MIN_RUNS_PER_N {
            let why: Vec<String> = failures
                .iter()
                .filter(|f| f.n == n)
                .map(|f| format!("seed {}: {}", f.seed, f.error))
                .collect();
            bail!(
                "study failed: only {ok} successful run(s) at n = {n} (need {MIN_RUNS_PER_N}); {}",
                why.join("; ")
            );
        }
    }
    let rec0 = &records[0];
    let beta = rec0.beta.unwrap_or(f64::NAN);
    let metrics = if opts.metrics.is_empty() {
        vec!["tv_value".to_string(), "w1_value".to_string()]
    } else {
        opts.metrics.clone()
    };
    let mut fits = Vec::new();
    let mut medians = BTreeMap::new();
    for (k, m) in metrics.iter().enumerate() {
        let target = target_slope(m, rec0.d, rec0.d_star, beta);
        let band = if k == 0 { opts.band } else { None };
        if records.iter().all(|r| r.metric(m).is_none()) {
            continue;
        }
        let (fit, med) = fit_metric(&records, m, target, band)?;
        fits.push(fit);
        medians.insert(m.clone(), med);
    }
    Ok(RateStudyReport {
        records,
        failures,
        n_list: n_list.to_vec(),
        medians,
        fits,
    })
}

#[derive(Debug, Clone)]
pub struct AdaptivityReport {
    pub records: Vec<RateRecord>,
    pub d_list: Vec<usize>,
    /// Median marginal TV of the active coordinate per `d`.
    pub marginal_tv: Vec<f64>,
    /// Median KS distance of the last padded coordinate to uniform per `d`
    /// (NaN when there is no padding).
    pub padded_ks: Vec<f64>,
    /// `marginal_tv[k] / marginal_tv[0]`.
    pub ratios: Vec<f64>,
    pub factor: f64,
    pub pass: bool,
}

/// Runs `base` (a product density with uniform padding) at every ambient
/// dimension in `d_list` with fixed `n`, comparing the active-coordinate
/// marginal TV against the smallest dimension.
pub fn run_adaptivity_study(
    base: &RunConfig,
    d_list: &[usize],
    n: usize,
    seeds: &[u64],
    factor: f64,
) -> Result<AdaptivityReport> {
    ensure!(!d_list.is_empty(), "need at least one dimension");
    ensure!(seeds.len() >= MIN_RUNS_PER_N, "need at least {MIN_RUNS_PER_N} seeds");
    let DensityChoice::Product { active, .. } = base.density else {
        bail!("an adaptivity study needs a product density padded with uniform coordinates");
    };
    ensure!(
        d_list.iter().all(|&d| d >= active),
        "every dimension must hold the active coordinates"
    );
    let cells: Vec<(usize, u64)> = d_list
        .iter()
        .flat_map(|&d| seeds.iter().map(move |&s| (d, s)))
        .collect();
    let records: Vec<RateRecord> = cells
        .par_iter()
        .map(|&(d, seed)| {
            let mut cfg = base.clone();
            cfg.n = n;
            cfg.seed = seed;
            if let DensityChoice::Product { dim, .. } = &mut cfg.density {
                *dim = d;
            }
            cfg.metrics.marginal = Some(0);
            run_end_to_end(&cfg).map(|o| o.record)
        })
        .collect::<Result<_>>()?;
    let per_d = |f: fn(&RateRecord) -> Option<f64>| -> Vec<f64> {
        d_list
            .iter()
            .map(|&d| {
                median(
                    &records
                        .iter()
                        .filter(|r| r.d == d)
                        .map(|r| f(r).unwrap_or(f64::NAN))
                        .collect::<Vec<_>>(),
                )
            })
            .collect()
    };
    let marginal_tv = per_d(|r| r.marginal_tv);
    let padded_ks = per_d(|r| r.padded_ks);
    let ratios: Vec<f64> = marginal_tv.iter().map(|v| v / marginal_tv[0]).collect();
    let pass = ratios
        .iter()
        .all(|r| r.is_finite() && *r <= factor && *r >= 1.0 / factor);
    Ok(AdaptivityReport {
        records,
        d_list: d_list.to_vec(),
        marginal_tv,
        padded_ks,
        ratios,
        factor,
        pass,
    })
}
