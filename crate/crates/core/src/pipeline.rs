//! Per-layer orchestration: manifest → covariances → ρ gate → subspaces →
//! reports.
//!
//! Every layer gets the SVD baseline and a Fisher-aligned subspace so that
//! ΔJ, overlaps and angles are always reported; the plan's `method` records
//! which of the two the gate selected. Layers wider than
//! [`EXACT_CUTOFF`] use the sketched solver unless `exact_only` is set.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compress::{fasc_subspace, svd_subspace, CenteredPair, FascConfig, Method};
use crate::diagnostics::{apply_gate, principal_angles, rho_score, Gate, GateConfig, RhoFlag, RhoReport};
use crate::error::{Error, Result};
use crate::harness::rank_for;
use crate::sketch::{choose_sketch_size, derive_seed, sketched_fasc_traced, subspace_overlap, SketchConfig};
use crate::stats::CovarianceSet;
use crate::tensor_io::{LayerEntry, Manifest};

/// Widest layer solved exactly by default.
pub const EXACT_CUTOFF: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanConfig {
    pub rank_fraction: f64,
    pub threshold: f64,
    pub master_seed: u64,
    pub exact_only: bool,
    pub layer_exclusion: bool,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            rank_fraction: 0.5,
            threshold: 0.3,
            master_seed: 0,
            exact_only: false,
            layer_exclusion: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer_id: u32,
    pub method: Method,
    pub gate: Gate,
    pub d: usize,
    pub k: usize,
    pub rank_fraction: f64,
    /// 0 means the exact solver.
    pub sketch_m: usize,
    pub seed: u64,
    pub rho: f64,
    pub threshold: f64,
    pub flags: Vec<RhoFlag>,
}

/// Worker pool sized by `FASC_THREADS` when set.
pub fn worker_pool() -> rayon::ThreadPool {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("FASC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            builder = builder.num_threads(n);
        }
    }
    builder.build().expect("thread pool")
}

fn plan_layer(manifest: &Manifest, entry: &LayerEntry, cfg: &PlanConfig) -> Result<LayerPlan> {
    let (xs, gs) = manifest.load_layer(entry)?;
    let cov = CovarianceSet::from_blocks(&xs, &gs)?;
    let mut report = match rho_score(&cov) {
        Ok(rho) => RhoReport {
            layer_id: entry.layer_id,
            rho,
            ci_low: rho,
            ci_high: rho,
            n: cov.n,
            gate: Gate::UseSvd,
            flags: BTreeSet::new(),
        },
        Err(Error::DegenerateGradients { .. }) => RhoReport::degenerate(entry.layer_id, cov.n),
        Err(_) => RhoReport {
            rho: 0.0,
            flags: BTreeSet::new(),
            ..RhoReport::degenerate(entry.layer_id, cov.n)
        },
    };
    let gate_cfg = GateConfig {
        threshold: cfg.threshold,
        layer_exclusion: cfg.layer_exclusion,
    };
    apply_gate(&mut report, entry.role, manifest.total_layers(), &gate_cfg);

    let d = cov.d;
    let k = rank_for(cfg.rank_fraction, d);
    let sketch_m = if cfg.exact_only || d <= EXACT_CUTOFF {
        0
    } else {
        choose_sketch_size(report.rho, k, d, &SketchConfig::default())
    };
    Ok(LayerPlan {
        layer_id: entry.layer_id,
        method: if report.gate == Gate::UseFasc { Method::Fasc } else { Method::Svd },
        gate: report.gate,
        d,
        k,
        rank_fraction: cfg.rank_fraction,
        sketch_m,
        seed: derive_seed(cfg.master_seed, u64::from(entry.layer_id)),
        rho: report.rho,
        threshold: cfg.threshold,
        flags: report.flags.into_iter().collect(),
    })
}

/// One plan per manifest layer, in manifest order.
pub fn plan_run(manifest: &Manifest, cfg: &PlanConfig) -> Result<Vec<LayerPlan>> {
    if manifest.layers.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if !(cfg.rank_fraction > 0.0 && cfg.rank_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("rank fraction must be in (0, 1], got {}", cfg.rank_fraction)));
    }
    worker_pool().install(|| manifest.layers.par_iter().map(|e| plan_layer(manifest, e, cfg)).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerTimings {
    pub load_ms: f64,
    pub svd_ms: f64,
    pub fasc_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerResult {
    pub plan: LayerPlan,
    pub j_svd: Option<f64>,
    pub j_fasc: Option<f64>,
    /// J of the gated method.
    pub j_selected: Option<f64>,
    pub overlap_fasc_svd: Option<f64>,
    pub angles_deg: Vec<f64>,
    pub median_angle_deg: Option<f64>,
    pub errors: Vec<String>,
    pub timings: LayerTimings,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub layers: usize,
    pub use_fasc: usize,
    pub use_svd: usize,
    pub excluded: usize,
    pub failed: usize,
    pub total_j_svd: f64,
    pub total_j_selected: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub calibration_tag: String,
    pub layers: Vec<LayerResult>,
    pub summary: RunSummary,
}

impl RunReport {
    /// Copy with every timing field zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> RunReport {
        let mut r = self.clone();
        for l in &mut r.layers {
            l.timings = LayerTimings::default();
        }
        r.summary.total_ms = 0.0;
        r
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// `layer,rho,method,J_svd,J_fasc,overlap,median_angle_deg`
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "rho", "method", "J_svd", "J_fasc", "overlap", "median_angle_deg"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for l in &self.layers {
            w.write_record([
                l.plan.layer_id.to_string(),
                l.plan.rho.to_string(),
                l.plan.method.to_string(),
                opt(l.j_svd),
                opt(l.j_fasc),
                opt(l.overlap_fasc_svd),
                opt(l.median_angle_deg),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `run_report.json` and `run_report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("run_report.json");
        fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("run_report.csv");
        fs::write(&csv, self.to_csv()?).map_err(|e| Error::io(&csv, e))
    }
}

fn execute_layer(manifest: &Manifest, entry: &LayerEntry, plan: &LayerPlan, fasc_cfg: &FascConfig) -> LayerResult {
    let mut result = LayerResult {
        plan: plan.clone(),
        j_svd: None,
        j_fasc: None,
        j_selected: None,
        overlap_fasc_svd: None,
        angles_deg: Vec::new(),
        median_angle_deg: None,
        errors: Vec::new(),
        timings: LayerTimings::default(),
    };
    let t = Instant::now();
    let loaded = manifest
        .load_layer(entry)
        .and_then(|(xs, gs)| Ok((CovarianceSet::from_blocks(&xs, &gs)?, CenteredPair::new(&xs, &gs)?)));
    result.timings.load_ms = t.elapsed().as_secs_f64() * 1e3;
    let (cov, pair) = match loaded {
        Ok(v) => v,
        Err(e) => {
            result.errors.push(format!("load: {e}"));
            return result;
        }
    };

    let t = Instant::now();
    let svd = svd_subspace(&cov, plan.k);
    result.timings.svd_ms = t.elapsed().as_secs_f64() * 1e3;
    let svd = match svd {
        Ok(s) => {
            match pair.objective(&s) {
                Ok(j) => result.j_svd = Some(j),
                Err(e) => result.errors.push(format!("svd: {e}")),
            }
            Some(s)
        }
        Err(e) => {
            result.errors.push(format!("svd: {e}"));
            None
        }
    };

    let t = Instant::now();
    let fasc = if plan.sketch_m == 0 {
        fasc_subspace(&cov, plan.k, fasc_cfg)
    } else {
        sketched_fasc_traced(&pair, plan.k, &SketchConfig::gaussian(plan.sketch_m, plan.seed), fasc_cfg).map(|(s, _)| s)
    };
    result.timings.fasc_ms = t.elapsed().as_secs_f64() * 1e3;
    let fasc = match fasc {
        Ok(s) => {
            match pair.objective(&s) {
                Ok(j) => result.j_fasc = Some(j),
                Err(e) => result.errors.push(format!("fasc: {e}")),
            }
            Some(s)
        }
        Err(e) => {
            result.errors.push(format!("fasc: {e}"));
            None
        }
    };

    if let (Some(f), Some(s)) = (&fasc, &svd) {
        result.overlap_fasc_svd = subspace_overlap(f, s).ok();
        if let Ok(a) = principal_angles(f, s) {
            result.median_angle_deg = Some(a.median_deg);
            result.angles_deg = a.angles_deg;
        }
    }
    result.j_selected = match plan.method {
        Method::Fasc => result.j_fasc,
        _ => result.j_svd,
    };
    result
}

/// Runs every plan; per-layer failures are recorded and do not stop the run.
pub fn execute_run(plans: &[LayerPlan], manifest: &Manifest, fasc_cfg: &FascConfig) -> Result<RunReport> {
    if manifest.layers.is_empty() || plans.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let manifest_ids: Vec<u32> = manifest.layers.iter().map(|l| l.layer_id).collect();
    let plan_ids: Vec<u32> = plans.iter().map(|p| p.layer_id).collect();
    if manifest_ids != plan_ids {
        return Err(Error::Manifest(format!(
            "plans cover layers {plan_ids:?}, manifest has {manifest_ids:?}"
        )));
    }
    let start = Instant::now();
    let layers: Vec<LayerResult> = worker_pool().install(|| {
        manifest
            .layers
            .par_iter()
            .zip(plans.par_iter())
            .map(|(entry, plan)| execute_layer(manifest, entry, plan, fasc_cfg))
            .collect()
    });

    let mut summary = RunSummary {
        layers: layers.len(),
        ..RunSummary::default()
    };
    for l in &layers {
        match l.plan.gate {
            Gate::UseFasc => summary.use_fasc += 1,
            Gate::UseSvd => summary.use_svd += 1,
            Gate::Excluded => summary.excluded += 1,
        }
        if l.j_selected.is_none() {
            summary.failed += 1;
        }
        summary.total_j_svd += l.j_svd.unwrap_or(0.0);
        summary.total_j_selected += l.j_selected.unwrap_or(0.0);
    }
    summary.total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(RunReport {
        format_version: manifest.format_version,
        calibration_tag: manifest.calibration_tag.clone(),
        layers,
        summary,
    })
}
