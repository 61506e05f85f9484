use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use factordiff_bench::config::{init_threads_from_env, ModelChoice, RunConfig};
use factordiff_bench::pipeline::{
    blank_record, fit_model, load_model, measure, persist, run_end_to_end, sampler_config,
};
use factordiff_bench::report::{append_records, emit_report, read_records_file, MetricFit};
use factordiff_bench::study::{fit_metric, run_adaptivity_study, run_rate_study, target_slope, StudyOptions};
use factordiff_bench::verify::{summary, verify_spec, write_rows, VerifyOptions};
use factordiff_core::decomposition::ProductDensitySpec;
use factordiff_core::density::DensitySpecFile;
use factordiff_core::rng::derive_seed;
use factordiff_core::samples::{read_samples_csv, write_samples_csv, SampleHeader};
use factordiff_core::{reverse_sample, QuadSpec, Schedule};

#[derive(Parser)]
#[command(name = "factordiff", version, about = "Diffusion density estimation experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Density spec utilities.
    #[command(subcommand)]
    Density(DensityCmd),
    /// Train one network on the whole time window.
    Train(ConfigArg),
    /// Train one network per dyadic time interval.
    TrainPiecewise(ConfigArg),
    /// Reverse-sample from a trained run directory.
    Sample {
        #[command(flatten)]
        config: ConfigArg,
        /// Run directory holding `network.json` or `manifest.json`.
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline, or score an existing sample file.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Check the decomposition identities on the shipped product specs.
    VerifyDecomposition {
        #[arg(long, default_value = "decomposition")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 5)]
        per_axis: usize,
    },
    /// Error rates over a geometric list of sample sizes.
    RateStudy {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Acceptance band `lo,hi` for the slope of the first metric.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        band: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
    },
    /// Active-coordinate error against ambient dimension at fixed n.
    AdaptivityStudy {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        d: Vec<usize>,
        #[arg(long)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 2.5)]
        factor: f64,
    },
    /// Summarize a records CSV, fitting rates per run name.
    Report {
        csv: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "tv_value,w1_value")]
        metrics: Vec<String>,
    },
}

#[derive(Subcommand)]
enum DensityCmd {
    /// Compute and store the normalizing constant.
    Normalize {
        spec: PathBuf,
        /// Output path; defaults to rewriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw exact samples.
    Sample {
        spec: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config)
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

fn train_cmd(mut cfg: RunConfig, piecewise: bool) -> Result<()> {
    match (&cfg.model, piecewise) {
        (ModelChoice::Piecewise { .. } | ModelChoice::PiecewiseSingle, true) | (ModelChoice::Network, false) => {}
        _ if piecewise => bail!("train-piecewise needs a piecewise model in the config"),
        _ => cfg.model = ModelChoice::Network,
    }
    let res = cfg.resolve()?;
    for c in &res.checks {
        eprintln!("scaling: {c}");
    }
    let density = cfg.density.build()?;
    let data = density.sample(cfg.n, derive_seed(cfg.seed, 1))?;
    let (model, outcomes) = fit_model(&cfg, &res, &density, &data)?;
    let logs: Vec<_> = outcomes.iter().map(|o| o.log.clone()).collect();
    let dir = out_dir(&cfg);
    let sc = sampler_config(&cfg, &res);
    let samples = reverse_sample(model.score(), &cfg.schedule, &sc)?.samples;
    let mut rec = blank_record(&cfg, &res, &density, &outcomes);
    measure(&cfg, &res, &density, Some(&model), &samples, &mut rec)?;
    let run = persist(&dir, &cfg, &res, &model, &logs, &samples, &rec, &res.checks)?;
    for (j, o) in outcomes.iter().enumerate() {
        println!("interval {j}: best step {} val loss {:.6}", o.best_step, o.best_val);
    }
    println!("artifacts in {}", run.display());
    Ok(())
}

fn write_csv_samples(path: &Path, s: &factordiff_core::Samples, header: &SampleHeader) -> Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_samples_csv(std::io::BufWriter::new(f), s, header)?;
    Ok(())
}

fn print_fits(fits: &[MetricFit]) {
    for f in fits {
        println!(
            "{}: slope {:.4} ± {:.4}, 95% CI [{:.4}, {:.4}], target {} {}",
            f.metric,
            f.fit.slope,
            f.fit.std_err,
            f.fit.ci_lo,
            f.fit.ci_hi,
            f.target.map_or("-".into(), |t| format!("{t:.4}")),
            if f.pass { "PASS" } else { "FAIL" }
        );
    }
}

fn main() -> Result<()> {
    init_threads_from_env();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Density(DensityCmd::Normalize { spec, out }) => {
            let file = DensitySpecFile::load(&spec)?;
            let density = file.build(QuadSpec::auto(file.dim))?;
            file.with_normalization(&density).save(out.as_ref().unwrap_or(&spec))?;
            println!("log Z = {:.12} (tolerance {:.2e})", density.log_z(), density.quad_tol());
        }
        Cmd::Density(DensityCmd::Sample { spec, n, seed, out }) => {
            let file = DensitySpecFile::load(&spec)?;
            let density = file.build(QuadSpec::auto(file.dim))?;
            let s = density.sample(n, seed)?;
            let header = SampleHeader {
                seed,
                spec_hash: density.spec_hash(),
                extra: Vec::new(),
            };
            write_csv_samples(&out, &s, &header)?;
        }
        Cmd::Train(c) => train_cmd(c.load()?, false)?,
        Cmd::TrainPiecewise(c) => train_cmd(c.load()?, true)?,
        Cmd::Sample { config, run_dir, out } => {
            let cfg = config.load()?;
            let res = cfg.resolve()?;
            let model = load_model(&run_dir)?;
            let s = reverse_sample(model.score(), &cfg.schedule, &sampler_config(&cfg, &res))?;
            let header = SampleHeader {
                seed: cfg.seed,
                spec_hash: cfg.density.build()?.spec_hash(),
                extra: vec![("checkpoints".into(), model.fingerprints().join(";"))],
            };
            write_csv_samples(&out, &s.samples, &header)?;
            println!(
                "{} samples, {:.4} outside the cube",
                s.samples.len(),
                s.outside_fraction()
            );
        }
        Cmd::Eval { config, samples } => {
            let cfg = config.load()?;
            let rec = match samples {
                None => {
                    let out = run_end_to_end(&cfg)?;
                    for l in &out.log {
                        eprintln!("{l}");
                    }
                    out.record
                }
                Some(path) => {
                    let res = cfg.resolve()?;
                    let density = cfg.density.build()?;
                    let f = std::fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
                    let (s, _) = read_samples_csv(f)?;
                    let mut rec = blank_record(&cfg, &res, &density, &[]);
                    rec.chains = s.len();
                    measure(&cfg, &res, &density, None, &s, &mut rec)?;
                    rec
                }
            };
            let dir = out_dir(&cfg);
            std::fs::create_dir_all(&dir)?;
            append_records(&dir.join("records.csv"), std::slice::from_ref(&rec))?;
            let (_, text) = emit_report(std::slice::from_ref(&rec), &[])?;
            print!("{text}");
        }
        Cmd::VerifyDecomposition { out_dir, per_axis } => {
            let schedule = Schedule::default();
            let opts = VerifyOptions {
                per_axis,
                ..VerifyOptions::default()
            };
            let mut rows = Vec::new();
            for spec in ProductDensitySpec::shipped() {
                rows.extend(verify_spec(&spec, &schedule, opts)?);
            }
            std::fs::create_dir_all(&out_dir)?;
            write_rows(std::fs::File::create(out_dir.join("decomposition.csv"))?, &rows)?;
            let text = summary(&rows);
            std::fs::write(out_dir.join("decomposition.txt"), &text)?;
            print!("{text}");
        }
        Cmd::RateStudy {
            config,
            n,
            seeds,
            band,
            metrics,
        } => {
            let cfg = config.load()?;
            let dir = out_dir(&cfg);
            std::fs::create_dir_all(&dir)?;
            let band = match band.as_deref() {
                None => None,
                Some([lo, hi]) => Some((*lo, *hi)),
                Some(_) => bail!("--band takes two values"),
            };
            let opts = StudyOptions {
                metrics,
                band,
                csv: Some(dir.join(format!("{}-rate.csv", cfg.name))),
            };
            let rep = run_rate_study(&cfg, &n, &seeds, &opts)?;
            for f in &rep.failures {
                eprintln!("cell n={} seed={} failed: {}", f.n, f.seed, f.error);
            }
            let (_, text) = emit_report(&rep.records, &rep.fits)?;
            std::fs::write(dir.join(format!("{}-rate.txt", cfg.name)), &text)?;
            print!("{text}");
        }
        Cmd::AdaptivityStudy {
            config,
            d,
            n,
            seeds,
            factor,
        } => {
            let cfg = config.load()?;
            let dir = out_dir(&cfg);
            std::fs::create_dir_all(&dir)?;
            let rep = run_adaptivity_study(&cfg, &d, n, &seeds, factor)?;
            append_records(&dir.join(format!("{}-adaptivity.csv", cfg.name)), &rep.records)?;
            for (k, d) in rep.d_list.iter().enumerate() {
                println!(
                    "d = {d}: marginal TV median {:.5} (ratio {:.3}), padded KS median {:.5}",
                    rep.marginal_tv[k], rep.ratios[k], rep.padded_ks[k]
                );
            }
            println!(
                "within factor {}: {}",
                rep.factor,
                if rep.pass { "PASS" } else { "FAIL" }
            );
        }
        Cmd::Report { csv, metrics } => {
            let records = read_records_file(&csv)?;
            let mut fits = Vec::new();
            let mut names: Vec<&str> = records.iter().map(|r| r.name.as_str()).collect();
            names.sort();
            names.dedup();
            for name in names {
                let group: Vec<_> = records.iter().filter(|r| r.name == name).cloned().collect();
                let mut ns: Vec<usize> = group.iter().map(|r| r.n).collect();
                ns.sort();
                ns.dedup();
                if ns.len() < 2 {
                    continue;
                }
                for m in &metrics {
                    if group.iter().all(|r| r.metric(m).is_none()) {
                        continue;
                    }
                    let r0 = &group[0];
                    let target = target_slope(m, r0.d, r0.d_star, r0.beta.unwrap_or(f64::NAN));
                    let (mut f, med) = fit_metric(&group, m, target, None)?;
                    f.metric = format!("{name}/{m}");
                    println!(
                        "{}: medians {:?}",
                        f.metric,
                        med.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>()
                    );
                    fits.push(f);
                }
            }
            let (_, text) = emit_report(&records, &fits)?;
            print!("{text}");
            print_fits(&fits);
        }
    }
    Ok(())
}
