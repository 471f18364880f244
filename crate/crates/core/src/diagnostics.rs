//! Activation–gradient coupling diagnostics.
//!
//! The dependence violation score of a layer is
//!
//! ```text
//! ρ = ‖Σxg‖_F / (‖Σxx‖_F^{1/2} · ‖Σgg‖_F^{1/2})
//! ```
//!
//! It is the square root of the RV coefficient, so `0 ≤ ρ ≤ 1`, and equals 1
//! when gradients and activations are the same stream. Confidence intervals
//! come from a percentile bootstrap over sample indices.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compress::{CenteredPair, Subspace};
use crate::error::{Error, Result};
use crate::sketch::derive_seed;
use crate::stats::CovarianceSet;
use crate::tensor_io::{LayerRole, TensorBlock};

/// Gradient covariance norm below which ρ is considered unreliable.
pub const DEGENERATE_GRADIENT_NORM: f64 = 1e-4;
pub const DEFAULT_RHO_THRESHOLD: f64 = 0.3;
pub const DEFAULT_RESAMPLES: usize = 1000;
pub const MIN_BOOTSTRAP_SAMPLES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    UseFasc,
    UseSvd,
    Excluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoFlag {
    DegenerateGradients,
    ExcludedLayerRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhoReport {
    pub layer_id: u32,
    pub rho: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub gate: Gate,
    pub flags: BTreeSet<RhoFlag>,
}

impl RhoReport {
    /// Report for a layer whose gradients are too flat to score.
    pub fn degenerate(layer_id: u32, n: usize) -> Self {
        Self {
            layer_id,
            rho: 0.0,
            ci_low: 0.0,
            ci_high: 0.0,
            n,
            gate: Gate::UseSvd,
            flags: BTreeSet::from([RhoFlag::DegenerateGradients]),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.flags.contains(&RhoFlag::DegenerateGradients)
    }

    pub fn ci_width(&self) -> f64 {
        self.ci_high - self.ci_low
    }
}

/// Serialized form shared by ρ and angle reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub layer_id: u32,
    pub rho: f64,
    pub ci: [f64; 2],
    pub n: usize,
    pub gate: Gate,
    pub flags: Vec<RhoFlag>,
    pub angles_deg: Vec<f64>,
}

impl From<&RhoReport> for DiagnosticRecord {
    fn from(r: &RhoReport) -> Self {
        Self {
            layer_id: r.layer_id,
            rho: r.rho,
            ci: [r.ci_low, r.ci_high],
            n: r.n,
            gate: r.gate,
            flags: r.flags.iter().copied().collect(),
            angles_deg: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleReport {
    pub layer_id: Option<u32>,
    /// Ascending, in degrees.
    pub angles_deg: Vec<f64>,
    pub median_deg: f64,
}

fn rho_from_norms(xg: f64, xx: f64, gg: f64) -> f64 {
    let denom = xx.sqrt() * gg.sqrt();
    if denom > 0.0 {
        xg / denom
    } else {
        0.0
    }
}

/// Dependence violation score of a finalized covariance set.
pub fn rho_score(cov: &CovarianceSet) -> Result<f64> {
    let gg = cov.sigma_gg.norm();
    if gg < DEGENERATE_GRADIENT_NORM {
        return Err(Error::DegenerateGradients { norm: gg });
    }
    let xx = cov.sigma_xx.norm();
    if xx == 0.0 {
        return Err(Error::ZeroActivations);
    }
    Ok(rho_from_norms(cov.sigma_xg.norm(), xx, gg))
}

/// Linear-interpolation quantile of sorted data (`q` in [0, 1]).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// ρ of one bootstrap resample of the stacked centered samples `[X | G]`.
fn resample_rho(stacked: &DMatrix<f64>, d: usize, seed: u64) -> f64 {
    let n = stacked.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u32; n];
    for _ in 0..n {
        counts[rng.random_range(0..n)] += 1;
    }
    let mut mean = vec![0.0; 2 * d];
    for (i, &c) in counts.iter().enumerate() {
        if c > 0 {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += f64::from(c) * stacked[(i, j)];
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let rows: Vec<usize> = (0..n).filter(|&i| counts[i] > 0).collect();
    let weighted = DMatrix::from_fn(rows.len(), 2 * d, |r, j| {
        let i = rows[r];
        f64::from(counts[i]).sqrt() * (stacked[(i, j)] - mean[j])
    });
    let s = weighted.tr_mul(&weighted) / n as f64;
    let xx = s.view((0, 0), (d, d)).norm();
    let gg = s.view((d, d), (d, d)).norm();
    let xg = s.view((0, d), (d, d)).norm();
    rho_from_norms(xg, xx, gg)
}

/// ρ with a percentile bootstrap interval (2.5%, 97.5%).
///
/// Resample `r` draws its indices from its own stream seeded by
/// `derive_seed(seed, r)`, so results do not depend on scheduling.
pub fn rho_bootstrap(
    layer_id: u32,
    xs: &TensorBlock,
    gs: &TensorBlock,
    resamples: usize,
    seed: u64,
) -> Result<RhoReport> {
    let cov = CovarianceSet::from_blocks(xs, gs)?;
    let rho = rho_score(&cov)?;
    let n = xs.n();
    if n < MIN_BOOTSTRAP_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_BOOTSTRAP_SAMPLES,
            have: n,
        });
    }
    if resamples == 0 {
        return Err(Error::InvalidConfig("resamples must be >= 1".into()));
    }
    let d = xs.d();
    let pair = CenteredPair::new(xs, gs)?;
    let mut stacked = DMatrix::zeros(n, 2 * d);
    stacked.view_mut((0, 0), (n, d)).copy_from(&pair.xs);
    stacked.view_mut((0, d), (n, d)).copy_from(&pair.gs);

    let mut rhos: Vec<f64> = (0..resamples as u64)
        .into_par_iter()
        .map(|r| resample_rho(&stacked, d, derive_seed(seed, r)))
        .collect();
    rhos.sort_by(f64::total_cmp);

    let gate = if rho > DEFAULT_RHO_THRESHOLD {
        Gate::UseFasc
    } else {
        Gate::UseSvd
    };
    Ok(RhoReport {
        layer_id,
        rho,
        ci_low: quantile(&rhos, 0.025),
        ci_high: quantile(&rhos, 0.975),
        n,
        gate,
        flags: BTreeSet::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    pub threshold: f64,
    /// Exclude attention layers 0–2 and the final layer.
    pub layer_exclusion: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_RHO_THRESHOLD,
            layer_exclusion: true,
        }
    }
}

/// Whether the layer-exclusion rule removes a layer from gating.
pub fn excluded_by_rule(layer_id: u32, role: LayerRole, total_layers: u32) -> bool {
    (layer_id <= 2 && role == LayerRole::Attention) || (total_layers > 0 && layer_id == total_layers - 1)
}

pub fn gate_layer(
    report: &RhoReport,
    layer_id: u32,
    role: LayerRole,
    total_layers: u32,
    cfg: &GateConfig,
) -> Gate {
    if cfg.layer_exclusion && excluded_by_rule(layer_id, role, total_layers) {
        Gate::Excluded
    } else if report.rho > cfg.threshold && !report.is_degenerate() {
        Gate::UseFasc
    } else {
        Gate::UseSvd
    }
}

/// Sets `report.gate`, adding the exclusion flag when the rule fires.
pub fn apply_gate(report: &mut RhoReport, role: LayerRole, total_layers: u32, cfg: &GateConfig) {
    report.gate = gate_layer(report, report.layer_id, role, total_layers, cfg);
    if report.gate == Gate::Excluded {
        report.flags.insert(RhoFlag::ExcludedLayerRule);
    }
}

fn median(sorted: &[f64]) -> f64 {
    let k = sorted.len();
    if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    }
}

/// Principal angles between two equal-rank subspaces, ascending, degrees.
///
/// Cosines are the singular values of `Q_aᵀ Q_b`. Angles below 45° are
/// taken from the sines (singular values of `Q_b − Q_a Q_aᵀ Q_b`) instead,
/// where arccos loses precision.
pub fn principal_angles(a: &Subspace, b: &Subspace) -> Result<AngleReport> {
    if a.d() != b.d() {
        return Err(Error::DimensionMismatch {
            expected: a.d(),
            got: b.d(),
        });
    }
    if a.k() != b.k() {
        return Err(Error::RankMismatch { a: a.k(), b: b.k() });
    }
    let cross = a.basis().transpose() * b.basis();
    let residual = b.basis() - a.basis() * &cross;

    let mut cosines: Vec<f64> = SVD::new(cross, false, false).singular_values.iter().copied().collect();
    cosines.sort_by(|x, y| y.total_cmp(x));
    let mut sines: Vec<f64> = SVD::new(residual, false, false).singular_values.iter().copied().collect();
    sines.sort_by(f64::total_cmp);

    let mut angles: Vec<f64> = cosines
        .iter()
        .zip(&sines)
        .map(|(&c, &s)| {
            let c = c.clamp(0.0, 1.0);
            let rad = if c * c >= 0.5 { s.clamp(0.0, 1.0).asin() } else { c.acos() };
            rad.to_degrees()
        })
        .collect();
    angles.sort_by(f64::total_cmp);
    Ok(AngleReport {
        layer_id: None,
        median_deg: median(&angles),
        angles_deg: angles,
    })
}

/// Pearson correlation coefficient.
pub fn rho_correlation(rhos: &[f64], gains: &[f64]) -> Result<f64> {
    if rhos.len() != gains.len() {
        return Err(Error::UndefinedCorrelation(format!(
            "length mismatch {} vs {}",
            rhos.len(),
            gains.len()
        )));
    }
    let n = rhos.len();
    if n < 3 {
        return Err(Error::UndefinedCorrelation(format!("need at least 3 points, have {n}")));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(rhos), mean(gains));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in rhos.iter().zip(gains) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::Method;
    use crate::tensor_io::TensorKind;
    use nalgebra::DVector;
    use rand_distr::{Distribution, StandardNormal};

    fn span(cols: &[&[f64]]) -> Subspace {
        let d = cols[0].len();
        let mut b = DMatrix::zeros(d, cols.len());
        for (j, c) in cols.iter().enumerate() {
            let v = DVector::from_column_slice(c);
            b.set_column(j, &(v.normalize()));
        }
        Subspace::new(b, vec![1.0; cols.len()], Method::Svd).unwrap()
    }

    fn report(rho: f64) -> RhoReport {
        RhoReport {
            layer_id: 0,
            rho,
            ci_low: rho,
            ci_high: rho,
            n: 100,
            gate: Gate::UseSvd,
            flags: BTreeSet::new(),
        }
    }

    fn gaussian_block(seed: u64, n: usize, d: usize, kind: TensorKind) -> TensorBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, d, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        TensorBlock::from_matrix(0, kind, &m).unwrap()
    }

    #[test]
    fn rho_of_identical_streams_is_one() {
        let xs = gaussian_block(1, 256, 6, TensorKind::Activation);
        let cov = CovarianceSet::from_blocks(&xs, &xs).unwrap();
        assert!((rho_score(&cov).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rho_of_uncorrelated_streams_is_zero() {
        // x and g supported on disjoint sample indices: Σxg = 0 exactly
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let g = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let cov = CovarianceSet::from_matrices(&x, &g).unwrap();
        assert_eq!(rho_score(&cov).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_gradients() {
        let xs = gaussian_block(2, 64, 3, TensorKind::Activation);
        let flat = TensorBlock::new(0, TensorKind::Gradient, 64, 3, vec![0.5; 192]).unwrap();
        let cov = CovarianceSet::from_blocks(&xs, &flat).unwrap();
        assert!(matches!(rho_score(&cov), Err(Error::DegenerateGradients { .. })));
        assert!(rho_bootstrap(0, &xs, &flat, 10, 0).is_err());
    }

    #[test]
    fn bootstrap_identical_streams_collapses() {
        let xs = gaussian_block(3, 128, 4, TensorKind::Activation);
        let r = rho_bootstrap(5, &xs, &xs, 200, 9).unwrap();
        assert_eq!(r.layer_id, 5);
        assert!(r.ci_low >= 1.0 - 1e-9 && r.ci_high <= 1.0 + 1e-9);
    }

    #[test]
    fn bootstrap_single_resample() {
        let xs = gaussian_block(4, 64, 3, TensorKind::Activation);
        let gs = gaussian_block(5, 64, 3, TensorKind::Gradient);
        let r = rho_bootstrap(0, &xs, &gs, 1, 17).unwrap();
        assert_eq!(r.ci_low, r.ci_high);
        let pair = CenteredPair::new(&xs, &gs).unwrap();
        let mut stacked = DMatrix::zeros(64, 6);
        stacked.view_mut((0, 0), (64, 3)).copy_from(&pair.xs);
        stacked.view_mut((0, 3), (64, 3)).copy_from(&pair.gs);
        assert_eq!(r.ci_low, resample_rho(&stacked, 3, derive_seed(17, 0)));
    }

    #[test]
    fn bootstrap_needs_32_samples() {
        let xs = gaussian_block(6, 31, 2, TensorKind::Activation);
        assert!(matches!(
            rho_bootstrap(0, &xs, &xs, 10, 0),
            Err(Error::TooFewSamples { needed: 32, .. })
        ));
    }

    #[test]
    fn gating_rules() {
        let cfg = GateConfig::default();
        assert_eq!(gate_layer(&report(0.45), 12, LayerRole::Mlp, 32, &cfg), Gate::UseFasc);
        assert_eq!(gate_layer(&report(0.45), 31, LayerRole::Mlp, 32, &cfg), Gate::Excluded);
        assert_eq!(gate_layer(&report(0.29), 12, LayerRole::Mlp, 32, &cfg), Gate::UseSvd);
        assert_eq!(gate_layer(&report(0.45), 1, LayerRole::Attention, 32, &cfg), Gate::Excluded);
        assert_eq!(gate_layer(&report(0.45), 1, LayerRole::Mlp, 32, &cfg), Gate::UseFasc);

        let off = GateConfig {
            layer_exclusion: false,
            ..cfg
        };
        assert_eq!(gate_layer(&report(0.45), 31, LayerRole::Mlp, 32, &off), Gate::UseFasc);

        let mut flat = RhoReport::degenerate(4, 100);
        flat.rho = 0.9;
        assert_eq!(gate_layer(&flat, 4, LayerRole::Mlp, 32, &cfg), Gate::UseSvd);

        let mut last = report(0.45);
        last.layer_id = 31;
        apply_gate(&mut last, LayerRole::Mlp, 32, &cfg);
        assert!(last.flags.contains(&RhoFlag::ExcludedLayerRule));
    }

    #[test]
    fn hand_constructed_angles() {
        let e1: &[f64] = &[1.0, 0.0, 0.0];
        let e2: &[f64] = &[0.0, 1.0, 0.0];
        let e23: &[f64] = &[0.0, 1.0, 1.0];

        let same = principal_angles(&span(&[e1, e2]), &span(&[e1, e2])).unwrap();
        assert!(same.angles_deg.iter().all(|a| a.abs() <= 1e-9));

        let ortho = principal_angles(&span(&[e1]), &span(&[e2])).unwrap();
        assert!((ortho.angles_deg[0] - 90.0).abs() <= 1e-9);

        let mixed = principal_angles(&span(&[e1, e23]), &span(&[e1, e2])).unwrap();
        assert!(mixed.angles_deg[0].abs() <= 1e-9);
        assert!((mixed.angles_deg[1] - 45.0).abs() <= 1e-9);
        assert!((mixed.median_deg - 22.5).abs() <= 1e-9);

        assert!(principal_angles(&span(&[e1]), &span(&[e1, e2])).is_err());
    }

    #[test]
    fn pearson() {
        let x = [0.1, 0.4, 0.2, 0.9, 0.5];
        let up: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let down: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((rho_correlation(&x, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((rho_correlation(&x, &down).unwrap() + 1.0).abs() < 1e-12);
        assert!(rho_correlation(&x, &[1.0; 5]).is_err());
        assert!(rho_correlation(&x[..2], &up[..2]).is_err());
        assert!(rho_correlation(&x, &up[..4]).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.125), 1.5);
        assert_eq!(quantile(&[7.0], 0.975), 7.0);
    }
}
