//! Decomposition checks on the shipped product specs, as rows for a CSV
//! report and a text summary.

use std::fmt::Write as _;
use std::io::Write;

use anyhow::Result;
use factordiff_core::decomposition::{
    eval_delta, probe_grid, subsets, verify_delta_refactor, verify_identity, verify_smallness, verify_taylor_refactor,
    Integrator, ProductDensitySpec, SIGMA_GRID,
};
use factordiff_core::Schedule;
use serde::{Deserialize, Serialize};

/// Tolerance on the relative identity residual and the refactorization residuals.
pub const IDENTITY_TOL: f64 = 1e-3;
/// Tolerance on residuals that vanish identically for linear components.
pub const LINEAR_TOL: f64 = 1e-8;
/// Allowed distance of the smallness slope from `|A|`.
pub const SLOPE_TOL: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub spec: String,
    pub check: String,
    /// Pair indices joined by `+`; empty for whole-spec checks.
    pub subset: String,
    pub value: f64,
    /// `value` must not exceed this (slopes: distance from the target).
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub per_axis: usize,
    /// Panels per axis of the direct quadrature.
    pub panels: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            per_axis: 5,
            panels: 48,
        }
    }
}

fn label(subset: &[usize]) -> String {
    subset.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("+")
}

fn row(spec: &ProductDensitySpec, check: &str, subset: &[usize], value: f64, tolerance: f64) -> VerifyRow {
    VerifyRow {
        spec: spec.name.clone(),
        check: check.into(),
        subset: label(subset),
        value,
        tolerance,
        pass: value <= tolerance,
    }
}

/// Identity, refactorization, first-order expansion and smallness checks
/// for one spec.
pub fn verify_spec(spec: &ProductDensitySpec, schedule: &Schedule, opts: VerifyOptions) -> Result<Vec<VerifyRow>> {
    let probes = probe_grid(spec.dim, opts.per_axis, &SIGMA_GRID, schedule)?;
    let integ = Integrator::for_spec(spec);
    let linear = spec.name.starts_with("linear");
    let mut rows = Vec::new();
    if spec.dim <= 3 && spec.len() <= 3 {
        let r = verify_identity(spec, &probes, &integ, opts.panels)?;
        rows.push(row(spec, "identity", &[], r.max_relative_residual, IDENTITY_TOL));
    }
    let nonempty: Vec<Vec<usize>> = subsets(spec.len()).into_iter().filter(|s| !s.is_empty()).collect();
    for a in &nonempty {
        let r = verify_delta_refactor(spec, a, &probes, &integ)?;
        let tol = if linear { LINEAR_TOL } else { IDENTITY_TOL };
        rows.push(row(spec, "refactor", a, r.max_residual, tol));
        if spec.is_differentiable() && a.len() <= 2 && (2..=3).contains(&spec.dim) {
            let t = verify_taylor_refactor(spec, a, &probes, &integ)?;
            rows.push(row(spec, "taylor", a, t.max_residual, tol));
        }
        if linear {
            let worst = probes
                .iter()
                .map(|p| eval_delta(spec, a, p, &integ).map(f64::abs))
                .collect::<factordiff_core::Result<Vec<_>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            rows.push(row(spec, "delta-vanishes", a, worst, LINEAR_TOL));
        }
        // smooth components are second order in the noise level per pair
        if spec.is_lipschitz() && !spec.is_differentiable() && a.len() <= 2 {
            let s = verify_smallness(spec, a, &probes, &integ)?;
            let mut r = row(spec, "smallness-slope", a, (s.slope - a.len() as f64).abs(), SLOPE_TOL);
            r.pass &= s.fitted_constant <= s.certified_bound;
            rows.push(r);
        }
    }
    Ok(rows)
}

pub fn write_rows<W: Write>(out: W, rows: &[VerifyRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn summary(rows: &[VerifyRow]) -> String {
    let mut s = String::new();
    for r in rows {
        writeln!(
            s,
            "{:<14} {:<16} {:<6} {:>12.3e} <= {:<8.1e} {}",
            r.spec,
            r.check,
            r.subset,
            r.value,
            r.tolerance,
            if r.pass { "PASS" } else { "FAIL" }
        )
        .unwrap();
    }
    let failed = rows.iter().filter(|r| !r.pass).count();
    writeln!(s, "{} check(s), {failed} failed", rows.len()).unwrap();
    s
}
