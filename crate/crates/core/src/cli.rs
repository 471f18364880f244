//! Command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 degraded (some layer failed or
//! was degenerate; reports are still written), 3 I/O or data error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::compress::{fasc_subspace, svd_subspace, FascConfig};
use crate::diagnostics::{
    apply_gate, principal_angles, rho_bootstrap, AngleReport, DiagnosticRecord, GateConfig, RhoReport,
    DEFAULT_RESAMPLES, DEFAULT_RHO_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::harness::{load_samples, rank_for, threshold_sweep, write_fixture, RampFixture, SynthMode};
use crate::pipeline::{execute_run, plan_run, worker_pool, PlanConfig};
use crate::stats::CovarianceSet;
use crate::tensor_io::Manifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DEGRADED: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fasc", version, about = "Fisher-aligned activation subspace compression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Coupling score ρ with bootstrap intervals for every layer.
    Rho(RhoArgs),
    /// Plan and run per-layer compression, writing JSON and CSV reports.
    Compress(CompressArgs),
    /// Write a synthetic fixture manifest and tensors.
    Synth(SynthArgs),
    /// Gate layers across several ρ thresholds.
    Sweep(SweepArgs),
    /// Principal angles between the Fisher-aligned and SVD subspaces.
    Angles(AnglesArgs),
}

#[derive(Debug, Args)]
pub struct GateArgs {
    #[arg(long, default_value_t = DEFAULT_RHO_THRESHOLD)]
    pub rho_threshold: f64,
    /// Disable the early-attention / final-layer exclusion rule.
    #[arg(long)]
    pub no_layer_exclusion: bool,
}

impl GateArgs {
    fn config(&self) -> GateConfig {
        GateConfig {
            threshold: self.rho_threshold,
            layer_exclusion: !self.no_layer_exclusion,
        }
    }
}

#[derive(Debug, Args)]
pub struct RhoArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub gate: GateArgs,
    /// Output directory; the report goes to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub rank_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub gate: GateArgs,
    /// Never use the sketched solver.
    #[arg(long)]
    pub exact_only: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthModeArg::Planted)]
    pub mode: SynthModeArg,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 2048)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.5)]
    pub gain_min: f64,
    #[arg(long, default_value_t = 3.0)]
    pub gain_max: f64,
    #[arg(long, default_value_t = 1.0)]
    pub variance_high: f64,
    #[arg(long, default_value_t = 0.5)]
    pub variance_low: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.25)]
    pub planted_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SynthModeArg {
    Planted,
    Identical,
    Independent,
}

impl From<SynthModeArg> for SynthMode {
    fn from(m: SynthModeArg) -> Self {
        match m {
            SynthModeArg::Planted => SynthMode::Planted,
            SynthModeArg::Identical => SynthMode::Identical,
            SynthModeArg::Independent => SynthMode::Independent,
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.0,0.1,0.3,0.5,1.01")]
    pub thresholds: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub rank_frac: f64,
    #[arg(long)]
    pub no_layer_exclusion: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnglesArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub rank_frac: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct RhoLayerOutput {
    #[serde(flatten)]
    record: DiagnosticRecord,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct RhoOutput {
    calibration_tag: String,
    resamples: usize,
    seed: u64,
    threshold: f64,
    layers: Vec<RhoLayerOutput>,
}

#[derive(Debug, Serialize)]
struct AnglesLayerOutput {
    #[serde(flatten)]
    angles: Option<AngleReport>,
    layer: u32,
    k: usize,
    error: Option<String>,
}

/// Parses `args` (including the program name) and runs the command.
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
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

/// Usage errors for bad parameters, I/O code for everything touching data.
pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::InvalidRank { .. } => EXIT_USAGE,
        _ => EXIT_IO,
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Rho(a) => cmd_rho(&a),
        Command::Compress(a) => cmd_compress(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Angles(a) => cmd_angles(&a),
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>, file: &str) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(file);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn check_rank_frac(rf: f64) -> Result<()> {
    if rf > 0.0 && rf <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("--rank-frac must be in (0, 1], got {rf}")))
    }
}

pub fn cmd_rho(a: &RhoArgs) -> Result<i32> {
    let manifest = Manifest::load(&a.manifest)?;
    if manifest.layers.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let gate = a.gate.config();
    let total = manifest.total_layers();
    let pool = worker_pool();
    let mut degraded = false;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let (xs, gs) = manifest.load_layer(entry)?;
        let (mut report, error) = match pool.install(|| rho_bootstrap(entry.layer_id, &xs, &gs, a.resamples, a.seed)) {
            Ok(r) => (r, None),
            Err(Error::DegenerateGradients { .. }) => (RhoReport::degenerate(entry.layer_id, xs.n()), None),
            Err(e @ Error::InvalidConfig(_)) => return Err(e),
            Err(e) => (RhoReport::degenerate(entry.layer_id, xs.n()), Some(e.to_string())),
        };
        apply_gate(&mut report, entry.role, total, &gate);
        degraded |= report.is_degenerate() || error.is_some();
        layers.push(RhoLayerOutput {
            record: DiagnosticRecord::from(&report),
            error,
        });
    }
    let output = RhoOutput {
        calibration_tag: manifest.calibration_tag.clone(),
        resamples: a.resamples,
        seed: a.seed,
        threshold: a.gate.rho_threshold,
        layers,
    };
    emit(&output, a.out.as_deref(), "rho_report.json")?;
    Ok(if degraded { EXIT_DEGRADED } else { EXIT_OK })
}

pub fn cmd_compress(a: &CompressArgs) -> Result<i32> {
    check_rank_frac(a.rank_frac)?;
    let manifest = Manifest::load(&a.manifest)?;
    let cfg = PlanConfig {
        rank_fraction: a.rank_frac,
        threshold: a.gate.rho_threshold,
        master_seed: a.seed,
        exact_only: a.exact_only,
        layer_exclusion: !a.gate.no_layer_exclusion,
    };
    let plans = plan_run(&manifest, &cfg)?;
    let report = execute_run(&plans, &manifest, &FascConfig::default())?;
    report.write(&a.out)?;
    let degraded = report.layers.iter().any(|l| !l.errors.is_empty());
    Ok(if degraded { EXIT_DEGRADED } else { EXIT_OK })
}

pub fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    let base = RampFixture {
        d: a.dim,
        n: a.samples,
        layers: a.layers,
        planted_fraction: a.planted_fraction,
        variance_high: a.variance_high,
        variance_low: a.variance_low,
        gain_min: a.gain_min,
        gain_max: a.gain_max,
        noise: a.noise,
        seed: a.seed,
    };
    if a.layers == 0 {
        return Err(Error::InvalidConfig("--layers must be >= 1".into()));
    }
    if !(a.planted_fraction > 0.0 && a.planted_fraction <= 1.0) {
        return Err(Error::InvalidConfig("--planted-fraction must be in (0, 1]".into()));
    }
    let mode = SynthMode::from(a.mode);
    let fixture = base.with_mode(mode);
    for l in 0..fixture.layers {
        fixture.layer_spec(l).validate()?;
    }
    let layers = fixture.generate()?;
    let tag = format!("synth-{}-seed{}", serde_json::to_value(mode)?.as_str().unwrap_or("fixture"), a.seed);
    write_fixture(&layers, &a.out, &tag)?;
    Ok(EXIT_OK)
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<i32> {
    check_rank_frac(a.rank_frac)?;
    let manifest = Manifest::load(&a.manifest)?;
    let samples = load_samples(&manifest)?;
    let gate = GateConfig {
        threshold: DEFAULT_RHO_THRESHOLD,
        layer_exclusion: !a.no_layer_exclusion,
    };
    let report = worker_pool().install(|| threshold_sweep(&samples, a.rank_frac, &a.thresholds, &gate))?;
    emit(&report, a.out.as_deref(), "sweep_report.json")?;
    Ok(EXIT_OK)
}

pub fn cmd_angles(a: &AnglesArgs) -> Result<i32> {
    check_rank_frac(a.rank_frac)?;
    let manifest = Manifest::load(&a.manifest)?;
    if manifest.layers.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let mut degraded = false;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let (xs, gs) = manifest.load_layer(entry)?;
        let k = rank_for(a.rank_frac, xs.d());
        let angles = CovarianceSet::from_blocks(&xs, &gs).and_then(|cov| {
            let f = fasc_subspace(&cov, k, &FascConfig::default())?;
            let s = svd_subspace(&cov, k)?;
            principal_angles(&f, &s)
        });
        let (angles, error) = match angles {
            Ok(mut r) => {
                r.layer_id = Some(entry.layer_id);
                (Some(r), None)
            }
            Err(e) => {
                degraded = true;
                (None, Some(e.to_string()))
            }
        };
        layers.push(AnglesLayerOutput {
            angles,
            layer: entry.layer_id,
            k,
            error,
        });
    }
    emit(&serde_json::json!({ "layers": layers }), a.out.as_deref(), "angles_report.json")?;
    Ok(if degraded { EXIT_DEGRADED } else { EXIT_OK })
}
