//! `omdc`: drying simulation, model identification and evaluation from the
//! command line. Every successful command writes `manifest.json` next to its
//! outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use omdc_core::dmdc::{dmdc_as_rom, dmdc_reduced};
use omdc_core::dryer::{simulate, DryerConfig};
use omdc_core::grassmann::CgOptions;
use omdc_core::matstore::{normalize_fields, read_inputs_csv, write_csv, write_inputs_csv};
use omdc_core::omdc::{model_cost, omdc_identify, OmdcOptions};
use omdc_core::romsim::{compare, eigenvalues, rom_simulate, write_trajectory_csv};
use omdc_core::{RomModel, SnapshotSet};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "omdc", version, about = "Reduced-order model identification with control inputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the drying wood chip and store its snapshots.
    DrySim {
        /// JSON configuration; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the simulated duration in seconds.
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Identify a reduced model from a snapshot set.
    Identify {
        #[arg(long)]
        snapshots: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long, value_parser = parse_rank)]
        rank: usize,
        /// Identify on the raw data instead of per-field standardized data.
        #[arg(long)]
        no_normalize: bool,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        grad_tol: Option<f64>,
        #[arg(long)]
        rel_cost_tol: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a reduced model from an initial snapshot under an input schedule.
    RomRun {
        #[arg(long)]
        model: PathBuf,
        /// Input CSV, one row per step; a leading `t` column is ignored.
        #[arg(long)]
        inputs: PathBuf,
        /// Snapshot set holding the initial state and the field layout.
        #[arg(long)]
        snapshots: PathBuf,
        /// Snapshot column used as the initial state.
        #[arg(long, default_value_t = 0)]
        x0_column: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a model replaying the inputs of a snapshot set with its data.
    Compare {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        snapshots: PathBuf,
        /// Metrics CSV; the time series go to `<stem>_series.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the eigenvalues of a model's reduced system matrix.
    Eig {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MethodArg {
    Dmdc,
    Omdc,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_hash: String,
    inputs: BTreeMap<String, PathBuf>,
    outputs: BTreeMap<String, PathBuf>,
    /// Wall-clock seconds per stage.
    timings: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Value::is_null")]
    summary: Value,
}

impl RunManifest {
    fn new(command: &str, config: &Value) -> Self {
        Self {
            command: command.to_string(),
            config_hash: hex::encode(Sha256::digest(config.to_string().as_bytes())),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings: BTreeMap::new(),
            summary: Value::Null,
        }
    }

    fn input(&mut self, key: &str, path: &Path) {
        self.inputs.insert(key.into(), path.to_path_buf());
    }

    fn output(&mut self, key: &str, path: &Path) {
        self.outputs.insert(key.into(), path.to_path_buf());
    }

    fn time(&mut self, stage: &str, since: Instant) {
        self.timings.insert(stage.into(), since.elapsed().as_secs_f64());
    }

    /// Writes `manifest.json` in `dir` via a temporary file and a rename.
    fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        let tmp = dir.join(".manifest.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn parse_rank(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("rank must be at least 1".into()),
        Ok(r) => Ok(r),
        Err(e) => Err(e.to_string()),
    }
}

/// Directory that receives the manifest of a command writing `out`; it is
/// created if missing.
fn manifest_dir(out: &Path) -> Result<PathBuf> {
    let dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn dry_sim(config: Option<PathBuf>, t_end: Option<f64>, out: PathBuf) -> Result<()> {
    let mut cfg: DryerConfig = match &config {
        Some(p) => serde_json::from_slice(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => DryerConfig::default(),
    };
    if let Some(t) = t_end {
        cfg.t_end = t;
    }
    let mut manifest = RunManifest::new("dry-sim", &serde_json::to_value(&cfg)?);
    if let Some(p) = &config {
        manifest.input("config", p);
    }

    info!(
        "simulating {}x{}x{} cells for {} s",
        cfg.grid.nx, cfg.grid.ny, cfg.grid.nz, cfg.t_end
    );
    let started = Instant::now();
    let (set, report) = simulate(&cfg)?;
    manifest.time("simulate", started);
    manifest.timings.insert("step_ms".into(), report.step_time_ms);

    let started = Instant::now();
    set.save(&out)?;
    write_inputs_csv(&out.join("inputs.csv"), set.u(), set.dt_sample(), &["T_inf", "rho_inf"])?;
    let rows = (0..report.times.len()).map(|k| vec![report.times[k], report.mean_temperature[k], report.mean_moisture[k]]);
    write_csv(&out.join("means.csv"), &["t", "T_mean", "X_mean"], rows)?;
    fs::write(out.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;
    manifest.time("write", started);

    manifest.output("snapshots", &out);
    manifest.output("inputs", &out.join("inputs.csv"));
    manifest.output("means", &out.join("means.csv"));
    manifest.summary = json!({
        "state_dim": set.state_dim(),
        "snapshots": set.num_snapshots(),
        "steps": report.steps,
        "wall_time_s": report.wall_time_s,
        "step_time_ms": report.step_time_ms,
        "water_audit_error": report.water.relative_error(),
        "energy_audit_error": report.energy.relative_error(),
    });
    info!(
        "wrote {}x{} snapshots to {}",
        set.state_dim(),
        set.num_snapshots(),
        out.display()
    );
    manifest.write(&out)
}

#[allow(clippy::too_many_arguments)]
fn identify(
    snapshots: PathBuf,
    method: MethodArg,
    rank: usize,
    no_normalize: bool,
    max_iters: Option<usize>,
    grad_tol: Option<f64>,
    rel_cost_tol: Option<f64>,
    out: PathBuf,
) -> Result<()> {
    let mut cg = CgOptions::default();
    if let Some(v) = max_iters {
        cg.max_iters = v;
    }
    if let Some(v) = grad_tol {
        cg.grad_tol = v;
    }
    if let Some(v) = rel_cost_tol {
        cg.rel_cost_tol = v;
    }
    let opts = OmdcOptions { cg, rtol: None };
    let config = json!({
        "method": method,
        "rank": rank,
        "normalize": !no_normalize,
        "omdc": if matches!(method, MethodArg::Omdc) { serde_json::to_value(&opts)? } else { Value::Null },
    });
    let mut manifest = RunManifest::new("identify", &config);
    manifest.input("snapshots", &snapshots);

    let started = Instant::now();
    let raw = SnapshotSet::load(&snapshots).with_context(|| format!("loading snapshots from {}", snapshots.display()))?;
    let set = if no_normalize { raw } else { normalize_fields(&raw) };
    manifest.time("load", started);
    if rank >= set.num_snapshots().min(set.state_dim()) {
        bail!(
            "rank {rank} is too large for {} states and {} snapshots",
            set.state_dim(),
            set.num_snapshots()
        );
    }

    let (x, y) = set.split()?;
    let started = Instant::now();
    let (model, solver) = match method {
        MethodArg::Dmdc => {
            info!("DMDc with rank {rank}");
            let red = dmdc_reduced(&x, &y, set.u(), rank, None)?;
            (dmdc_as_rom(&red, set.dt_sample(), set.norm_spec().cloned())?, None)
        }
        MethodArg::Omdc => {
            info!("OMDc with rank {rank}");
            let fit = omdc_identify(&set, rank, &opts)?;
            info!(
                "CG stopped after {} iterations ({:?}), cost {:.6e}",
                fit.report.iterations, fit.report.termination, fit.cost
            );
            let report = serde_json::to_value(&fit.report)?;
            (fit.model, Some(report))
        }
    };
    manifest.time("identify", started);

    let cost = model_cost(&model.l, &model.m, &model.p, &x, &y, set.u());
    let started = Instant::now();
    model.save(&out, solver.clone())?;
    if let Some(report) = &solver {
        fs::write(out.join("cg_report.json"), serde_json::to_vec_pretty(report)?)?;
        manifest.output("cg_report", &out.join("cg_report.json"));
    }
    manifest.time("write", started);
    manifest.output("model", &out);
    manifest.summary = json!({
        "rank": rank,
        "cost": cost,
        "normalized": !no_normalize,
        "iterations": solver.as_ref().map(|s| s["iterations"].clone()),
        "termination": solver.as_ref().map(|s| s["termination"].clone()),
    });
    manifest.write(&out)
}

fn rom_run(model_dir: PathBuf, inputs: PathBuf, snapshots: PathBuf, x0_column: usize, out: PathBuf) -> Result<()> {
    let config = json!({ "x0_column": x0_column });
    let mut manifest = RunManifest::new("rom-run", &config);
    manifest.input("model", &model_dir);
    manifest.input("inputs", &inputs);
    manifest.input("snapshots", &snapshots);

    let started = Instant::now();
    let model = RomModel::load(&model_dir).with_context(|| format!("loading model from {}", model_dir.display()))?;
    let u = read_inputs_csv(&inputs)?;
    let set = SnapshotSet::load(&snapshots)?;
    if x0_column >= set.num_snapshots() {
        bail!("--x0-column {x0_column} is out of range for {} snapshots", set.num_snapshots());
    }
    if u.ncols() > 0 && u.nrows() != model.input_dim() {
        bail!("inputs have {} columns, the model expects {}", u.nrows(), model.input_dim());
    }
    let u = if u.ncols() == 0 { omdc_core::Mat::zeros(model.input_dim(), 0) } else { u };
    let x0 = set.physical_s().column(x0_column).into_owned();
    manifest.time("load", started);

    let started = Instant::now();
    let traj = rom_simulate(&model, &x0, &u)?;
    manifest.time("simulate", started);
    let steps = u.ncols();
    let step_ms = if steps > 0 { 1e3 * manifest.timings["simulate"] / steps as f64 } else { 0.0 };
    manifest.timings.insert("step_ms".into(), step_ms);

    let dir = manifest_dir(&out)?;
    let started = Instant::now();
    write_trajectory_csv(&out, &model, &traj, set.field_layout())?;
    manifest.time("write", started);
    manifest.output("trajectory", &out);
    manifest.summary = json!({ "steps": steps, "rank": model.rank() });
    info!("{} steps written to {}", steps, out.display());
    manifest.write(&dir)
}

fn series_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("compare");
    out.with_file_name(format!("{stem}_series.csv"))
}

fn compare_cmd(model_dir: PathBuf, snapshots: PathBuf, out: PathBuf) -> Result<()> {
    let mut manifest = RunManifest::new("compare", &json!({}));
    manifest.input("model", &model_dir);
    manifest.input("snapshots", &snapshots);

    let started = Instant::now();
    let model = RomModel::load(&model_dir)?;
    let set = SnapshotSet::load(&snapshots)?;
    manifest.time("load", started);

    let started = Instant::now();
    let x0 = set.physical_s().column(0).into_owned();
    let traj = rom_simulate(&model, &x0, set.u())?;
    let cmp = compare(&model, &traj, &set, &[])?;
    manifest.time("compare", started);

    let dir = manifest_dir(&out)?;
    let series = series_path(&out);
    cmp.write_metrics_csv(&out)?;
    cmp.write_series_csv(&series)?;
    manifest.output("metrics", &out);
    manifest.output("series", &series);
    manifest.summary = Value::Object(
        cmp.metrics
            .iter()
            .map(|m| (m.name.clone(), json!({ "rel_rms": m.rel_rms, "max_abs": m.max_abs })))
            .collect(),
    );
    for m in &cmp.metrics {
        info!("{}: relative RMS {:.3e}", m.name, m.rel_rms);
    }
    manifest.write(&dir)
}

fn eig(model_dir: PathBuf, out: PathBuf) -> Result<()> {
    let mut manifest = RunManifest::new("eig", &json!({}));
    manifest.input("model", &model_dir);
    let started = Instant::now();
    let model = RomModel::load(&model_dir)?;
    let spectrum = eigenvalues(&model.m)?;
    let dir = manifest_dir(&out)?;
    spectrum.write_csv(&out)?;
    manifest.time("eig", started);
    manifest.output("spectrum", &out);
    manifest.summary = json!({ "count": spectrum.len(), "spectral_radius": spectrum.spectral_radius() });
    manifest.write(&dir)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DrySim { config, t_end, out } => dry_sim(config, t_end, out),
        Command::Identify {
            snapshots,
            method,
            rank,
            no_normalize,
            max_iters,
            grad_tol,
            rel_cost_tol,
            out,
        } => identify(
            snapshots,
            method,
            rank,
            no_normalize,
            max_iters,
            grad_tol,
            rel_cost_tol,
            out,
        ),
        Command::RomRun {
            model,
            inputs,
            snapshots,
            x0_column,
            out,
        } => rom_run(model, inputs, snapshots, x0_column, out),
        Command::Compare { model, snapshots, out } => compare_cmd(model, snapshots, out),
        Command::Eig { model, out } => eig(model, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
