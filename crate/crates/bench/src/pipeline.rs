//! One end-to-end run: draw data, fit the score, reverse-sample, measure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use factordiff_core::distances::{ks_distance, tv_samples_vs_density, w1_1d_exact, w1_sliced};
use factordiff_core::oracle::score_l2_error;
use factordiff_core::rng::derive_seed;
use factordiff_core::samples::{write_samples_csv, SampleHeader};
use factordiff_core::score_matching::{TrainLogRow, TrainOutcome};
use factordiff_core::{
    reverse_sample, train, train_piecewise, CheckpointMeta, DiffusedOracle, InteractionDensity, PiecewiseScore,
    SamplerConfig, Samples, ScoreFunction, ScoreNetwork, TrainPlan, ZeroScore,
};
use serde::Serialize;

use crate::config::{DensityChoice, ModelChoice, Resolved, RunConfig};
use crate::report::{append_records, RateRecord, CODE_VERSION, SCHEMA_VERSION, SCORE_SIGMAS};

/// Seed labels of the pipeline stages.
const DATA: u64 = 1;
const TRAIN: u64 = 2;
const SAMPLER: u64 = 3;
const REFERENCE: u64 = 5;
const PROJECTIONS: u64 = 6;
const SCORE_MC: u64 = 7;

/// Fitted score model.
pub enum Model {
    Network(ScoreNetwork),
    Piecewise(PiecewiseScore),
    Oracle(Box<DiffusedOracle>),
    Zero(ZeroScore),
}

impl Model {
    pub fn score(&self) -> &dyn ScoreFunction {
        match self {
            Model::Network(n) => n,
            Model::Piecewise(p) => p,
            Model::Oracle(o) => o.as_ref(),
            Model::Zero(z) => z,
        }
    }

    /// Parameter fingerprints of the trained networks.
    pub fn fingerprints(&self) -> Vec<String> {
        match self {
            Model::Network(n) => vec![n.fingerprint()],
            Model::Piecewise(p) => p.nets.iter().map(|n| n.fingerprint()).collect(),
            _ => Vec::new(),
        }
    }
}

pub struct RunOutput {
    pub record: RateRecord,
    pub model: Model,
    pub samples: Samples,
    pub train_logs: Vec<Vec<TrainLogRow>>,
    /// Scaling checks and stage notes, in order.
    pub log: Vec<String>,
    /// Directory holding the artifacts, when persisted.
    pub run_dir: Option<PathBuf>,
}

fn stage<T, E>(name: &str, r: std::result::Result<T, E>) -> Result<T>
where
    E: Into<anyhow::Error>,
{
    r.map_err(|e| e.into().context(format!("stage `{name}` failed")))
}

/// Training plan for a resolved config.
pub fn train_plan(cfg: &RunConfig, res: &Resolved) -> TrainPlan {
    let t = &cfg.train;
    let mut plan = TrainPlan::new(
        res.width,
        res.depth,
        res.window,
        t.batch_size,
        t.steps_for(cfg.n),
        derive_seed(cfg.seed, TRAIN),
    );
    plan.trunc_b = t.trunc_b;
    plan.adam = t.adam();
    plan.final_lr_fraction = t.final_lr_fraction;
    plan.eval_every = t.eval_every;
    plan.mc_time_draws = t.mc_time_draws;
    plan.time_draws = t.time_draws;
    plan.encoding = t.encoding;
    plan
}

pub fn sampler_config(cfg: &RunConfig, res: &Resolved) -> SamplerConfig {
    let mut sc = SamplerConfig::new(
        res.window,
        cfg.sampler.steps,
        cfg.chains(),
        derive_seed(cfg.seed, SAMPLER),
    );
    sc.grid = cfg.sampler.grid;
    sc
}

/// Fits the configured score model on `data`.
pub fn fit_model(
    cfg: &RunConfig,
    res: &Resolved,
    density: &InteractionDensity,
    data: &Samples,
) -> Result<(Model, Vec<TrainOutcome>)> {
    let plan = train_plan(cfg, res);
    Ok(match &cfg.model {
        ModelChoice::Network => {
            let out = train(&plan, &cfg.schedule, data)?;
            (Model::Network(out.net.clone()), vec![out])
        }
        ModelChoice::Piecewise { .. } | ModelChoice::PiecewiseSingle => {
            let grid = res
                .grid
                .as_ref()
                .ok_or_else(|| anyhow!("piecewise model without a grid"))?;
            let (score, outs) = train_piecewise(grid, &plan, &cfg.schedule, data)?;
            (Model::Piecewise(score), outs)
        }
        ModelChoice::Oracle => (
            Model::Oracle(Box::new(DiffusedOracle::new(density.clone(), cfg.schedule.clone())?)),
            Vec::new(),
        ),
        ModelChoice::Zero => (Model::Zero(ZeroScore(res.dim)), Vec::new()),
    })
}

/// Linear interpolant of the marginal density of `coord` on a fine grid.
fn marginal_density(density: &InteractionDensity, coord: usize) -> Result<impl Fn(&[f64]) -> f64 + Sync> {
    const POINTS: usize = 2049;
    let grid: Vec<f64> = (0..POINTS)
        .map(|k| -1.0 + 2.0 * k as f64 / (POINTS - 1) as f64)
        .collect();
    let vals = density.marginal_1d(coord, &grid)?;
    Ok(move |x: &[f64]| {
        let u = (x[0] + 1.0) / 2.0 * (POINTS - 1) as f64;
        if !(0.0..=(POINTS - 1) as f64).contains(&u) {
            return 0.0;
        }
        let k = (u.floor() as usize).min(POINTS - 2);
        let f = u - k as f64;
        vals[k] * (1.0 - f) + vals[k + 1] * f
    })
}

fn column_samples(s: &Samples, coord: usize) -> Samples {
    Samples::new(1, s.column(coord)).expect("one column")
}

/// Fills the metric fields of `rec` from the generated samples; the score
/// errors need the model.
pub fn measure(
    cfg: &RunConfig,
    res: &Resolved,
    density: &InteractionDensity,
    model: Option<&Model>,
    samples: &Samples,
    rec: &mut RateRecord,
) -> Result<()> {
    let m = &cfg.metrics;
    rec.outside_fraction = samples.fraction_outside(1.0);
    if m.tv && res.dim <= 4 {
        let dens = |x: &[f64]| density.density(x);
        let tv = tv_samples_vs_density(samples, dens, m.bins)?;
        let clipped = tv_samples_vs_density(&samples.clipped_to_cube(), dens, m.bins)?;
        rec.tv_value = Some(tv.value);
        rec.tv_method = "histogram".into();
        rec.tv_bins = Some(tv.resolution);
        rec.tv_floor = Some(tv.error_estimate);
        rec.tv_clipped = Some(clipped.value);
    }
    if let Some(c) = m.marginal {
        let marg = marginal_density(density, c)?;
        rec.marginal_coord = Some(c);
        rec.marginal_tv = Some(tv_samples_vs_density(&column_samples(samples, c), marg, m.bins)?.value);
    }
    if let DensityChoice::Product { dim, active, .. } = cfg.density {
        if dim > active {
            let last = samples.column(dim - 1);
            rec.padded_ks = Some(ks_distance(&last, |x| ((x + 1.0) / 2.0).clamp(0.0, 1.0)));
        }
    }
    if m.w1 {
        let reference = density.sample(samples.len(), derive_seed(cfg.seed, REFERENCE))?;
        let w1 = if res.dim == 1 {
            w1_1d_exact(samples.as_slice(), reference.as_slice())?
        } else {
            w1_sliced(samples, &reference, m.projections, derive_seed(cfg.seed, PROJECTIONS))?
        };
        rec.w1_value = Some(w1.value);
        rec.w1_method = serde_plain(&w1.method);
        rec.w1_se = (res.dim > 1).then_some(w1.error_estimate);
    }
    if let (Some(model), true) = (model, m.score_mc > 0) {
        // the oracle is unavailable for large coupled blocks; the columns
        // stay empty then
        if let Ok(oracle) = DiffusedOracle::new(density.clone(), cfg.schedule.clone()) {
            let slots = [
                &mut rec.score_l2_s010,
                &mut rec.score_l2_s030,
                &mut rec.score_l2_s060,
                &mut rec.score_l2_s090,
            ];
            for (k, (slot, sigma)) in slots.into_iter().zip(SCORE_SIGMAS).enumerate() {
                let t = cfg.schedule.time_for_sigma(sigma)?;
                if !res.window.contains(t) {
                    continue;
                }
                let e = score_l2_error(
                    model.score(),
                    &oracle,
                    t,
                    m.score_mc,
                    derive_seed(cfg.seed, SCORE_MC + k as u64),
                )?;
                *slot = Some(e.value);
            }
        }
    }
    Ok(())
}

fn serde_plain<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Executes data sampling, score fitting, reverse sampling and metrics for
/// one config. Every number depends only on the config (its hash) and seed.
pub fn run_end_to_end(cfg: &RunConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let res = stage("config", cfg.resolve())?;
    let mut log: Vec<String> = res.checks.iter().map(|c| format!("scaling: {c}")).collect();
    let density = stage("density", cfg.density.build())?;
    let data = stage("data", density.sample(cfg.n, derive_seed(cfg.seed, DATA)))?;
    let (model, outcomes) = stage("train", fit_model(cfg, &res, &density, &data))?;
    for (j, o) in outcomes.iter().enumerate() {
        log.push(format!(
            "train: interval {j} best step {} val {:.6} ({} log rows)",
            o.best_step,
            o.best_val,
            o.log.len()
        ));
    }
    let sc = sampler_config(cfg, &res);
    let out = stage("sample", reverse_sample(model.score(), &cfg.schedule, &sc))?;

    let mut rec = blank_record(cfg, &res, &density, &outcomes);
    stage(
        "metrics",
        measure(cfg, &res, &density, Some(&model), &out.samples, &mut rec),
    )?;
    rec.wall_ms = start.elapsed().as_millis() as u64;

    let train_logs: Vec<Vec<TrainLogRow>> = outcomes.iter().map(|o| o.log.clone()).collect();
    let run_dir = match &cfg.out_dir {
        Some(dir) => Some(stage(
            "persist",
            persist(dir, cfg, &res, &model, &train_logs, &out.samples, &rec, &log),
        )?),
        None => None,
    };
    Ok(RunOutput {
        record: rec,
        model,
        samples: out.samples,
        train_logs,
        log,
        run_dir,
    })
}

/// Record with the run description filled in and every metric empty.
pub fn blank_record(
    cfg: &RunConfig,
    res: &Resolved,
    density: &InteractionDensity,
    outcomes: &[TrainOutcome],
) -> RateRecord {
    let last = |f: fn(&TrainLogRow) -> f64| -> Option<f64> {
        let v: Vec<f64> = outcomes.iter().filter_map(|o| o.log.last().map(f)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    RateRecord {
        schema_version: SCHEMA_VERSION,
        code_version: CODE_VERSION.into(),
        spec_hash: density.spec_hash(),
        config_hash: cfg.hash(),
        name: cfg.name.clone(),
        model: cfg.model.label().into(),
        seed: cfg.seed,
        d: res.dim,
        d_star: res.d_star,
        beta: res.beta.is_finite().then_some(res.beta),
        n: cfg.n,
        width: res.width,
        depth: res.depth,
        trunc_b: res.trunc_b,
        t_lo: res.window.t_lo,
        t_hi: res.window.t_hi,
        intervals: res.grid.as_ref().map_or(1, |g| g.len()),
        train_steps: if cfg.model.trains() {
            cfg.train.steps_for(cfg.n)
        } else {
            0
        },
        sampler_steps: cfg.sampler.steps,
        chains: cfg.chains(),
        tv_value: None,
        tv_method: "none".into(),
        tv_bins: None,
        tv_floor: None,
        tv_clipped: None,
        outside_fraction: 0.0,
        marginal_coord: None,
        marginal_tv: None,
        padded_ks: None,
        w1_value: None,
        w1_method: "none".into(),
        w1_se: None,
        score_l2_s010: None,
        score_l2_s030: None,
        score_l2_s060: None,
        score_l2_s090: None,
        train_loss: last(|r| r.train_loss),
        val_loss: outcomes
            .iter()
            .map(|o| o.best_val)
            .reduce(|a, b| a + b)
            .map(|s| s / outcomes.len() as f64),
        wall_ms: 0,
    }
}

pub fn run_dir_name(cfg: &RunConfig) -> String {
    format!("{}-{}-n{}-s{}", cfg.name, cfg.model.label(), cfg.n, cfg.seed)
}

#[derive(Serialize)]
struct Manifest<'a> {
    boundaries: &'a [f64],
    capacities: &'a [(usize, usize)],
    trunc_b: &'a [f64],
    checkpoints: Vec<String>,
}

pub fn write_train_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn persist(
    dir: &Path,
    cfg: &RunConfig,
    res: &Resolved,
    model: &Model,
    train_logs: &[Vec<TrainLogRow>],
    samples: &Samples,
    rec: &RateRecord,
    log: &[String],
) -> Result<PathBuf> {
    let run = dir.join(run_dir_name(cfg));
    std::fs::create_dir_all(&run).with_context(|| format!("creating {}", run.display()))?;
    std::fs::write(run.join("config.toml"), cfg.to_toml()?)?;
    std::fs::write(run.join("run.log"), log.join("\n") + "\n")?;
    let mut training = BTreeMap::new();
    training.insert("config_hash".to_string(), cfg.hash());
    match model {
        Model::Network(net) => {
            let meta = CheckpointMeta {
                t_lo: res.window.t_lo,
                t_hi: res.window.t_hi,
                seed: cfg.seed,
                training,
            };
            net.save(&run.join("network.json"), &meta)?;
        }
        Model::Piecewise(p) => {
            let mut names = Vec::new();
            for (j, net) in p.nets.iter().enumerate() {
                let w = p.grid.interval(j)?;
                let meta = CheckpointMeta {
                    t_lo: w.t_lo,
                    t_hi: w.t_hi,
                    seed: cfg.seed,
                    training: training.clone(),
                };
                let name = format!("interval_{j:02}.json");
                net.save(&run.join(&name), &meta)?;
                names.push(name);
            }
            let manifest = Manifest {
                boundaries: &p.grid.boundaries,
                capacities: &p.grid.capacities,
                trunc_b: &p.grid.trunc_b,
                checkpoints: names,
            };
            std::fs::write(run.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        }
        _ => {}
    }
    for (j, rows) in train_logs.iter().enumerate() {
        let name = if train_logs.len() == 1 {
            "train_log.csv".to_string()
        } else {
            format!("train_log_{j:02}.csv")
        };
        write_train_log(&run.join(name), rows)?;
    }
    let header = SampleHeader {
        seed: cfg.seed,
        spec_hash: rec.spec_hash.clone(),
        extra: vec![
            ("config_hash".into(), rec.config_hash.clone()),
            ("model".into(), rec.model.clone()),
        ],
    };
    let f = std::fs::File::create(run.join("samples.csv"))?;
    write_samples_csv(std::io::BufWriter::new(f), samples, &header)?;
    let rec_path = run.join("record.csv");
    let _ = std::fs::remove_file(&rec_path);
    append_records(&rec_path, std::slice::from_ref(rec))?;
    Ok(run)
}

/// Loads a persisted network or piecewise manifest as a score model.
pub fn load_model(run_dir: &Path) -> Result<Model> {
    let single = run_dir.join("network.json");
    if single.exists() {
        return Ok(Model::Network(ScoreNetwork::load(&single)?.0));
    }
    let manifest = run_dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest).with_context(|| format!("no checkpoint in {}", run_dir.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let boundaries: Vec<f64> = serde_json::from_value(v["boundaries"].clone())?;
    let capacities: Vec<(usize, usize)> = serde_json::from_value(v["capacities"].clone())?;
    let trunc_b: Vec<f64> = serde_json::from_value(v["trunc_b"].clone())?;
    let names: Vec<String> = serde_json::from_value(v["checkpoints"].clone())?;
    let mut grid = factordiff_core::TimeGrid::from_boundaries(boundaries, 1, 1.0)?;
    grid.capacities = capacities;
    grid.trunc_b = trunc_b;
    let nets = names
        .iter()
        .map(|n| Ok(ScoreNetwork::load(&run_dir.join(n))?.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(Model::Piecewise(PiecewiseScore::new(grid, nets)?))
}
