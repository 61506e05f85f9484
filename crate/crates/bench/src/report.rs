//! Versioned CSV records of end-to-end runs and their summary text.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{Context, Result};
use factordiff_core::Error;
use serde::{Deserialize, Serialize};

use crate::fit::{median, SlopeFit};

/// Bumped whenever a column is added, removed or reinterpreted.
pub const SCHEMA_VERSION: u32 = 1;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// `σ_t` values at which the score L2 error is reported.
pub const SCORE_SIGMAS: [f64; 4] = [0.1, 0.3, 0.6, 0.9];

/// Column order of the CSV; equal to the field order of [`RateRecord`].
pub const COLUMNS: [&str; 39] = [
    "schema_version",
    "code_version",
    "spec_hash",
    "config_hash",
    "name",
    "model",
    "seed",
    "d",
    "d_star",
    "beta",
    "n",
    "width",
    "depth",
    "trunc_b",
    "t_lo",
    "t_hi",
    "intervals",
    "train_steps",
    "sampler_steps",
    "chains",
    "tv_value",
    "tv_method",
    "tv_bins",
    "tv_floor",
    "tv_clipped",
    "outside_fraction",
    "marginal_coord",
    "marginal_tv",
    "padded_ks",
    "w1_value",
    "w1_method",
    "w1_se",
    "score_l2_s010",
    "score_l2_s030",
    "score_l2_s060",
    "score_l2_s090",
    "train_loss",
    "val_loss",
    "wall_ms",
];

/// One end-to-end run. Optional fields are empty in the CSV when a metric
/// was not computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub schema_version: u32,
    pub code_version: String,
    pub spec_hash: String,
    pub config_hash: String,
    pub name: String,
    pub model: String,
    pub seed: u64,
    pub d: usize,
    pub d_star: usize,
    pub beta: Option<f64>,
    pub n: usize,
    pub width: usize,
    pub depth: usize,
    pub trunc_b: f64,
    pub t_lo: f64,
    pub t_hi: f64,
    pub intervals: usize,
    pub train_steps: usize,
    pub sampler_steps: usize,
    pub chains: usize,
    /// Histogram TV (`∫|p − q|`, in `[0, 2]`), mass outside the cube included.
    pub tv_value: Option<f64>,
    pub tv_method: String,
    pub tv_bins: Option<usize>,
    /// Expected histogram TV of an exact sampler of the same size.
    pub tv_floor: Option<f64>,
    /// Histogram TV after clipping the samples to the cube.
    pub tv_clipped: Option<f64>,
    pub outside_fraction: f64,
    pub marginal_coord: Option<usize>,
    pub marginal_tv: Option<f64>,
    /// KS distance of the last coordinate to `Unif[-1, 1]` when it is a
    /// padding coordinate.
    pub padded_ks: Option<f64>,
    pub w1_value: Option<f64>,
    pub w1_method: String,
    pub w1_se: Option<f64>,
    pub score_l2_s010: Option<f64>,
    pub score_l2_s030: Option<f64>,
    pub score_l2_s060: Option<f64>,
    pub score_l2_s090: Option<f64>,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub wall_ms: u64,
}

impl RateRecord {
    /// Metric by CSV column name.
    pub fn metric(&self, column: &str) -> Option<f64> {
        match column {
            "tv_value" => self.tv_value,
            "tv_clipped" => self.tv_clipped,
            "marginal_tv" => self.marginal_tv,
            "w1_value" => self.w1_value,
            "score_l2_s010" => self.score_l2_s010,
            "score_l2_s030" => self.score_l2_s030,
            "score_l2_s060" => self.score_l2_s060,
            "score_l2_s090" => self.score_l2_s090,
            _ => None,
        }
    }

    /// Copy with the wall time zeroed, for comparing reruns.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_ms: 0,
            ..self.clone()
        }
    }
}

fn format_err(msg: String) -> anyhow::Error {
    anyhow::Error::new(Error::Format(msg))
}

fn writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(out)
}

/// Writes the header and the records.
pub fn write_records<W: Write>(out: W, records: &[RateRecord]) -> Result<()> {
    let mut w = writer(out);
    w.write_record(COLUMNS)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a CSV produced by [`write_records`]; a header other than
/// [`COLUMNS`] or a different schema version is a format error.
pub fn read_records<R: Read>(input: R) -> Result<Vec<RateRecord>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rd
        .headers()
        .map_err(|e| format_err(format!("unreadable header: {e}")))?;
    if header.iter().ne(COLUMNS.iter().copied()) {
        return Err(format_err(format!(
            "CSV columns do not match schema version {SCHEMA_VERSION}: {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut out = Vec::new();
    for (k, row) in rd.deserialize::<RateRecord>().enumerate() {
        let r = row.map_err(|e| format_err(format!("row {}: {e}", k + 1)))?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(format_err(format!(
                "row {} has schema version {}, expected {SCHEMA_VERSION}",
                k + 1,
                r.schema_version
            )));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn read_records_file(path: &Path) -> Result<Vec<RateRecord>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_records(f)
}

/// Appends records to a CSV file, writing the header when the file is new
/// and checking it otherwise.
pub fn append_records(path: &Path, records: &[RateRecord]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    if !fresh {
        let mut rd = csv::Reader::from_path(path)?;
        let header = rd.headers()?;
        if header.iter().ne(COLUMNS.iter().copied()) {
            return Err(format_err(format!("{} has a different CSV schema", path.display())));
        }
    }
    let f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = writer(f);
    if fresh {
        w.write_record(COLUMNS)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// A fitted rate with its verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricFit {
    pub metric: String,
    pub fit: SlopeFit,
    /// Reference slope, if the theory gives one.
    pub target: Option<f64>,
    pub target_in_ci: bool,
    /// Acceptance band for the slope.
    pub band: Option<(f64, f64)>,
    pub medians_decreasing: bool,
    pub pass: bool,
}

/// CSV text of `records` and a summary listing per-group medians and the
/// slope fits with pass/fail flags.
pub fn emit_report(records: &[RateRecord], fits: &[MetricFit]) -> Result<(String, String)> {
    let mut csv = Vec::new();
    write_records(&mut csv, records)?;
    let csv = String::from_utf8(csv).expect("csv is utf-8");

    let mut s = String::new();
    writeln!(
        s,
        "schema v{SCHEMA_VERSION}, code v{CODE_VERSION}, {} record(s)",
        records.len()
    )
    .unwrap();
    let mut groups: BTreeMap<(String, String, usize, usize), Vec<&RateRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.name.clone(), r.model.clone(), r.d, r.n))
            .or_default()
            .push(r);
    }
    if !groups.is_empty() {
        writeln!(
            s,
            "{:<24} {:<16} {:>3} {:>8} {:>5} {:>10} {:>10} {:>10}",
            "name", "model", "d", "n", "runs", "tv", "marg_tv", "w1"
        )
        .unwrap();
    }
    for ((name, model, d, n), rs) in &groups {
        let med = |f: fn(&RateRecord) -> Option<f64>| {
            median(&rs.iter().map(|r| f(r).unwrap_or(f64::NAN)).collect::<Vec<_>>())
        };
        writeln!(
            s,
            "{name:<24} {model:<16} {d:>3} {n:>8} {:>5} {:>10.5} {:>10.5} {:>10.5}",
            rs.len(),
            med(|r| r.tv_value),
            med(|r| r.marginal_tv),
            med(|r| r.w1_value),
        )
        .unwrap();
    }
    for f in fits {
        writeln!(
            s,
            "fit {}: slope {:.4} ± {:.4} (95% CI [{:.4}, {:.4}], {} points); target {}{}; medians decreasing: {}; band {}: {}",
            f.metric,
            f.fit.slope,
            f.fit.std_err,
            f.fit.ci_lo,
            f.fit.ci_hi,
            f.fit.points,
            f.target.map_or("none".to_string(), |t| format!("{t:.4}")),
            if f.target.is_some() {
                if f.target_in_ci { " (inside CI)" } else { " (outside CI)" }
            } else {
                ""
            },
            f.medians_decreasing,
            f.band.map_or("none".to_string(), |(a, b)| format!("[{a}, {b}]")),
            if f.pass { "PASS" } else { "FAIL" },
        )
        .unwrap();
    }
    Ok((csv, s))
}
