//! Command-line front end: `solve`, `check`, `lions`, `master`, `evaluate` and `oracle`.
//!
//! Every artifact carries the SHA-256 of the effective configuration. CSV files get a trailing
//! `config_hash` column whose value is filled in the first data row only; JSON files get a
//! `config_hash` field. Nothing time-dependent is written, so reruns are byte-identical.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::checks::{self, CHECK_NAMES};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fbsde;
use crate::field::Field;
use crate::grid::TimeGrid;
use crate::lions;
use crate::lq_oracle::solve_riccati;
use crate::master::master_residual;
use crate::measure::{format_float, EmpiricalMeasure};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_CONVERGENCE: i32 = 4;
pub const EXIT_CHECK_FAILED: i32 = 5;
pub const EXIT_NUMERIC: i32 = 6;

#[derive(Debug, Parser)]
#[command(
    name = "mkv-fbsde",
    version,
    about = "Particle solver for McKean-Vlasov forward-backward SDEs"
)]
pub struct Cli {
    /// Overrides the seed of the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the configured scenario and write the field, ensemble and diagnostics.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one named check; exit status 0 iff it passes.
    Check {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(CHECK_NAMES))]
        name: String,
        #[arg(long)]
        config: PathBuf,
        /// Also write the report to DIR/check_<name>.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lions derivative of a measure functional at the atoms of the initial law.
    Lions {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Master-equation residual of the solved field on the query grid.
    Master {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-solve from the query time and evaluate the field at the query points.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Riccati coefficients of a linear-quadratic scenario.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::Config(_) | Error::InvalidInput(_) | Error::InvalidSpec(_) | Error::Json(_) => {
            EXIT_CONFIG
        }
        Error::ConvergenceFailure { .. } | Error::BlowUp { .. } => EXIT_CONVERGENCE,
        Error::NumericDomain { .. }
        | Error::IllConditioned { .. }
        | Error::OracleBlowUp { .. }
        | Error::OffSupport
        | Error::Csv(_) => EXIT_NUMERIC,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .try_init();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_json(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig, out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = out
        .clone()
        .or_else(|| cfg.output.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no output directory: pass --out or set \"output\"".into()))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Writes CSV produced by `f` with a trailing `config_hash` column.
pub fn write_csv_artifact(
    path: &Path,
    hash: &str,
    f: impl FnOnce(&mut Vec<u8>) -> Result<()>,
) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(&buf[..]);
    let mut w = csv::Writer::from_path(path)?;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut row: Vec<&str> = rec.iter().collect();
        row.push(match i {
            0 => "config_hash",
            1 => hash,
            _ => "",
        });
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json_artifact(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Solve { config, out } => {
            let cfg = load(config, cli.seed)?;
            let dir = out_dir(&cfg, out)?;
            cmd_solve(&cfg, &dir)?;
            Ok(EXIT_OK)
        }
        Command::Check { name, config, out } => {
            let cfg = load(config, cli.seed)?;
            let report = checks::run_check(name, &cfg)?;
            let value = serde_json::to_value(&report)?;
            println!("{}", serde_json::to_string_pretty(&value)?);
            if let Some(o) = out {
                fs::create_dir_all(o)?;
                write_json_artifact(&o.join(format!("check_{name}.json")), &value)?;
            }
            Ok(if report.passed {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            })
        }
        Command::Lions { config, out } => {
            let cfg = load(config, cli.seed)?;
            let dir = out_dir(&cfg, out)?;
            cmd_lions(&cfg, &dir)?;
            Ok(EXIT_OK)
        }
        Command::Master { config, out } => {
            let cfg = load(config, cli.seed)?;
            let dir = out_dir(&cfg, out)?;
            cmd_master(&cfg, &dir)?;
            Ok(EXIT_OK)
        }
        Command::Evaluate { config, out } => {
            let cfg = load(config, cli.seed)?;
            let dir = out_dir(&cfg, out)?;
            cmd_evaluate(&cfg, &dir)?;
            Ok(EXIT_OK)
        }
        Command::Oracle { config, out } => {
            let cfg = load(config, cli.seed)?;
            let dir = out_dir(&cfg, out)?;
            cmd_oracle(&cfg, &dir)?;
            Ok(EXIT_OK)
        }
    }
}

/// Writes `field.csv`, `field.json`, `ensemble.csv` and `diagnostics.json` to `dir`.
pub fn cmd_solve(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let hash = cfg.hash();
    let scn = cfg.scenario()?;
    for f in &scn.flags {
        log::warn!("scenario {} is flagged {f}", scn.name);
    }
    let (ens, field) = checks::solve(cfg, &scn)?;
    let diag = field.diagnostics();
    log::info!("solve converged; final gap {:?}", diag.final_gap());
    write_csv_artifact(&dir.join("field.csv"), &hash, |w| field.write_csv(w))?;
    let mut meta = field.metadata();
    meta["scenario"] = json!(scn.name);
    meta["config_hash"] = json!(hash);
    write_json_artifact(&dir.join("field.json"), &meta)?;
    write_csv_artifact(&dir.join("ensemble.csv"), &hash, |w| ens.write_csv(w))?;
    let residual = fbsde::decoupling_residual(&ens, &field)?;
    let zmax = diag.z_consistency.iter().copied().fold(0.0, f64::max);
    let report = json!({
        "config_hash": hash,
        "scenario": scn.name,
        "flags": scn.flags,
        "tol_law": cfg.solver.tol_law,
        "final_gap": diag.final_gap(),
        "picard_gaps": diag.picard_gaps,
        "sweep_gaps": diag.sweep_gaps,
        "blocks": diag.blocks,
        "block_steps": diag.block_steps,
        "decoupling_residual": residual,
        "max_fit_rms": diag.max_fit_rms(),
        "fit_rms": diag.fit_rms,
        "max_z_consistency": zmax,
        "z_consistency": diag.z_consistency,
    });
    write_json_artifact(&dir.join("diagnostics.json"), &report)
}

/// Writes `lions.csv`: the Lions derivative of the query functional at every atom.
pub fn cmd_lions(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let mu = cfg.initial_law.sample(cfg.solver.particles, cfg.seed)?;
    let h = cfg
        .query
        .lions_step
        .unwrap_or_else(|| lions::default_step(&mu));
    let d = mu.dim();
    let est = match cfg.query.functional.as_str() {
        "mean" => lions::lions_derivative(&lions::linear_functional(vec![1.0; d]), &mu, h)?,
        "second_moment" => lions::lions_derivative(&lions::second_moment_functional(), &mu, h)?,
        "l2_norm" => lions::lions_derivative(&lions::l2_norm_functional(), &mu, h)?,
        "squared_mean" => lions::lions_derivative(&lions::squared_mean_functional(d), &mu, h)?,
        other => return Err(Error::Config(format!("unknown functional {other:?}"))),
    };
    write_csv_artifact(&dir.join("lions.csv"), &cfg.hash(), |w| {
        est.write_csv(&mu, w)
    })
}

const COMPONENTS: [&str; 7] = [
    "dt_term",
    "drift_term",
    "trace_term",
    "driver_term",
    "measure_drift_term",
    "measure_trace_term",
    "total",
];

/// Writes `master.csv`: residual components at the query times and points.
pub fn cmd_master(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let scn = cfg.scenario()?;
    let grid = cfg.grid()?;
    let (ens, field) = checks::solve(cfg, &scn)?;
    let (d, m) = scn.dims();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|j| format!("x{j}")));
    for c in COMPONENTS {
        if m == 1 {
            header.push(c.to_string());
        } else {
            header.extend((1..=m).map(|r| format!("{c}_{r}")));
        }
    }
    w.write_record(&header)?;
    for &t in &cfg.query.times {
        if !grid.contains(t) {
            return Err(Error::Config(format!("query time {t} outside the horizon")));
        }
        let k = ((t - grid.t0()) / grid.dt()).round() as usize;
        let tk = grid.time(k);
        let snap = ens.x_measure(k);
        let n = cfg.query.measure_atoms.clamp(1, snap.len());
        let mu = EmpiricalMeasure::from_flat(d, snap.as_flat()[..n * d].to_vec())?;
        for x in &cfg.query.points {
            if x.len() != d {
                return Err(Error::Config(format!(
                    "query point {x:?} does not have dimension {d}"
                )));
            }
            let r = master_residual(
                &field,
                scn.coefficients(),
                tk,
                x,
                &mu,
                cfg.query.stencils.into(),
            )?;
            let mut rec = vec![format_float(tk)];
            rec.extend(x.iter().map(|v| format_float(*v)));
            for part in [
                &r.dt_term,
                &r.drift_term,
                &r.trace_term,
                &r.driver_term,
                &r.measure_drift_term,
                &r.measure_trace_term,
                &r.total,
            ] {
                rec.extend(part.iter().map(|v| format_float(*v)));
            }
            w.write_record(&rec)?;
        }
    }
    let buf = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_csv_artifact(&dir.join("master.csv"), &cfg.hash(), |out| {
        out.extend_from_slice(&buf);
        Ok(())
    })
}

/// Writes `evaluate.csv`: `U(t, x, μ)` at the query points after solving on `[t, T]` from the
/// configured initial law.
pub fn cmd_evaluate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let scn = cfg.scenario()?;
    let full = cfg.grid()?;
    let t = cfg.query.evaluate_time;
    if !(t >= full.t0() && t < full.t_end()) {
        return Err(Error::Config(format!("evaluate_time {t} outside [t0, T)")));
    }
    let steps = (((full.t_end() - t) / full.dt()).round() as usize).max(1);
    let grid = TimeGrid::new(t, full.t_end(), steps)?;
    let (_, field) = fbsde::solve_long_horizon(
        scn.coefficients(),
        &cfg.initial_law,
        &grid,
        &cfg.solver_params(),
    )?;
    let mu = field.snapshot(0).clone();
    let (d, m) = scn.dims();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|j| format!("x{j}")));
    header.extend((1..=m).map(|r| format!("u{r}")));
    w.write_record(&header)?;
    for x in &cfg.query.points {
        if x.len() != d {
            return Err(Error::Config(format!(
                "query point {x:?} does not have dimension {d}"
            )));
        }
        let mut rec = vec![format_float(t)];
        rec.extend(x.iter().map(|v| format_float(*v)));
        rec.extend(field.eval(t, x, &mu).iter().map(|v| format_float(*v)));
        w.write_record(&rec)?;
    }
    let buf = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_csv_artifact(&dir.join("evaluate.csv"), &cfg.hash(), |out| {
        out.extend_from_slice(&buf);
        Ok(())
    })
}

/// Writes `oracle.csv` with the Riccati coefficients on the configured grid.
pub fn cmd_oracle(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let scn = cfg.scenario()?;
    let (spec, kind) = scn.lq.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "the oracle needs a linear-quadratic scenario (lq_mfg or lq_mkv), got {}",
            scn.name
        ))
    })?;
    let sol = solve_riccati(spec, *kind, &cfg.grid()?)?;
    write_csv_artifact(&dir.join("oracle.csv"), &cfg.hash(), |w| sol.write_csv(w))
}
