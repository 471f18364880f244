//! Rank-k projection subspaces: the Fisher-aligned solve, three baselines,
//! and the gradient-weighted reconstruction objective J(P).
//!
//! The Fisher-aligned subspace solves `Σxg Σgg Σxgᵀ v = λ (Σxx + εI) v` by
//! whitening. The regularized activation covariance is eigendecomposed,
//! eigenvalues below `tau · λ_max` are dropped, and the symmetric problem
//! `W A W u = λ u` is solved with `W` the truncated inverse square root.
//! Generalized eigenvectors are `Σxx`-orthogonal rather than orthonormal,
//! so the returned basis is a QR orthonormalization of their span and the
//! projector is the orthogonal projector onto that span.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{center_columns, orthonormalize, sym_eigen_desc, symmetrize};
use crate::stats::CovarianceSet;
use crate::tensor_io::{check_paired, TensorBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fasc,
    Svd,
    GradWeighted,
    FisherDiag,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Fasc => "fasc",
            Method::Svd => "svd",
            Method::GradWeighted => "grad_weighted",
            Method::FisherDiag => "fisher_diag",
        };
        f.write_str(s)
    }
}

/// An orthonormal rank-k basis of ℝᵈ.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    d: usize,
    k: usize,
    basis: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    method: Method,
    seed: Option<u64>,
    degenerate_spectrum: bool,
}

/// Deviations of a projector from the orthogonal-projector laws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectorDefects {
    /// ‖QᵀQ − I‖_F
    pub orthonormality: f64,
    /// ‖P² − P‖_F
    pub idempotence: f64,
    /// ‖P − Pᵀ‖_F
    pub symmetry: f64,
    /// |trace(P) − k|
    pub trace: f64,
}

impl Subspace {
    pub fn new(basis: DMatrix<f64>, eigenvalues: Vec<f64>, method: Method) -> Result<Self> {
        let (d, k) = basis.shape();
        if k == 0 || k > d {
            return Err(Error::InvalidRank { k, d });
        }
        if eigenvalues.len() != k {
            return Err(Error::RankMismatch {
                a: k,
                b: eigenvalues.len(),
            });
        }
        Ok(Self {
            d,
            k,
            basis,
            eigenvalues,
            method,
            seed: None,
            degenerate_spectrum: false,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// True when the k-th and (k+1)-th eigenvalues tie, so the span is not
    /// uniquely determined by the spectrum.
    pub fn degenerate_spectrum(&self) -> bool {
        self.degenerate_spectrum
    }

    pub(crate) fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    pub fn projector_defects(&self) -> ProjectorDefects {
        let p = self.projector();
        let gram = self.basis.transpose() * &self.basis;
        ProjectorDefects {
            orthonormality: (gram - DMatrix::identity(self.k, self.k)).norm(),
            idempotence: (&p * &p - &p).norm(),
            symmetry: (&p - p.transpose()).norm(),
            trace: (p.trace() - self.k as f64).abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FascConfig {
    /// Ridge added to Σxx.
    pub epsilon: f64,
    /// Eigenvalue truncation threshold relative to the largest eigenvalue
    /// of the regularized Σxx.
    pub tau: f64,
}

impl Default for FascConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            tau: 1e-6,
        }
    }
}

impl FascConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig(format!("tau must be in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }
}

fn check_rank(k: usize, d: usize) -> Result<()> {
    if k == 0 || k > d {
        Err(Error::InvalidRank { k, d })
    } else {
        Ok(())
    }
}

fn ties(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= 1e-10 * scale.abs().max(f64::MIN_POSITIVE)
}

/// Top-k eigenpairs of a symmetric matrix as a subspace.
fn top_k_eigen(m: &DMatrix<f64>, k: usize, method: Method) -> Result<Subspace> {
    let d = m.nrows();
    check_rank(k, d)?;
    let (values, vectors) = sym_eigen_desc(m);
    let basis = vectors.columns(0, k).into_owned();
    let eig = values[..k].iter().map(|v| v.max(0.0)).collect();
    let mut s = Subspace::new(basis, eig, method)?;
    s.degenerate_spectrum = k < d && ties(values[k - 1], values[k], values[0]);
    Ok(s)
}

/// Fisher-aligned rank-k subspace of an exact covariance set.
pub fn fasc_subspace(cov: &CovarianceSet, k: usize, cfg: &FascConfig) -> Result<Subspace> {
    cfg.validate()?;
    let d = cov.d;
    check_rank(k, d)?;

    let gg_norm = cov.sigma_gg.norm();
    if gg_norm < 1e-12 * d as f64 {
        return Err(Error::DegenerateGradients { norm: gg_norm });
    }

    let regularized = &cov.sigma_xx + DMatrix::identity(d, d) * cfg.epsilon;
    let (lambda, v) = sym_eigen_desc(&regularized);
    let cutoff = cfg.tau * lambda[0];
    let rank = lambda.iter().take_while(|&&l| l > 0.0 && l >= cutoff).count();
    if rank < k {
        return Err(Error::RankDeficient { rank, k });
    }

    // T = V_r Λ_r^{-1/2}; W = T V_rᵀ is the truncated inverse square root.
    let mut whiten = v.columns(0, rank).into_owned();
    for (j, mut col) in whiten.column_iter_mut().enumerate() {
        col /= lambda[j].sqrt();
    }

    let coupling = symmetrize(&(&cov.sigma_xg * &cov.sigma_gg * cov.sigma_xg.transpose()));
    let reduced = symmetrize(&(whiten.transpose() * coupling * &whiten));
    let (mu, u) = sym_eigen_desc(&reduced);

    let generalized = &whiten * u.columns(0, k);
    let basis = orthonormalize(&generalized);
    let eig = mu[..k].iter().map(|v| v.max(0.0)).collect();
    let mut s = Subspace::new(basis, eig, Method::Fasc)?;
    s.degenerate_spectrum = k < rank && ties(mu[k - 1], mu[k], mu[0]);
    Ok(s)
}

/// Top-k eigenvectors of Σxx.
pub fn svd_subspace(cov: &CovarianceSet, k: usize) -> Result<Subspace> {
    top_k_eigen(&cov.sigma_xx, k, Method::Svd)
}

/// Top-k eigenvectors of the centered covariance of `g ⊙ x`.
pub fn grad_weighted_subspace(xs: &TensorBlock, gs: &TensorBlock, k: usize) -> Result<Subspace> {
    check_paired(xs, gs)?;
    check_rank(k, xs.d())?;
    let mut h = xs.to_matrix().component_mul(&gs.to_matrix());
    let n = h.nrows() as f64;
    let raw_energy = h.norm_squared() / n;
    center_columns(&mut h);
    let cov = symmetrize(&(h.transpose() * &h / n));
    if cov.trace() <= 1e-12 * raw_energy {
        return Err(Error::ZeroWeightedVariance);
    }
    top_k_eigen(&cov, k, Method::GradWeighted)
}

/// Axis-aligned subspace of the k coordinates with the largest
/// `diag(Σgg)ⱼ · diag(Σxx)ⱼ`. Ties go to the lower index.
pub fn fisher_diag_subspace(cov: &CovarianceSet, k: usize) -> Result<Subspace> {
    let d = cov.d;
    check_rank(k, d)?;
    let scores: Vec<f64> = (0..d).map(|j| cov.sigma_gg[(j, j)] * cov.sigma_xx[(j, j)]).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut basis = DMatrix::zeros(d, k);
    for (col, &axis) in order[..k].iter().enumerate() {
        basis[(axis, col)] = 1.0;
    }
    let eig = order[..k].iter().map(|&j| scores[j].max(0.0)).collect();
    let mut s = Subspace::new(basis, eig, Method::FisherDiag)?;
    s.degenerate_spectrum = k < d && ties(scores[order[k - 1]], scores[order[k]], scores[order[0]]);
    Ok(s)
}

/// Column-centered 64-bit copies of a paired activation/gradient dump.
#[derive(Debug, Clone)]
pub struct CenteredPair {
    pub xs: DMatrix<f64>,
    pub gs: DMatrix<f64>,
}

impl CenteredPair {
    pub fn new(xs: &TensorBlock, gs: &TensorBlock) -> Result<Self> {
        check_paired(xs, gs)?;
        Ok(Self::from_matrices(xs.to_matrix(), gs.to_matrix()))
    }

    pub fn from_matrices(mut xs: DMatrix<f64>, mut gs: DMatrix<f64>) -> Self {
        center_columns(&mut xs);
        center_columns(&mut gs);
        Self { xs, gs }
    }

    pub fn n(&self) -> usize {
        self.xs.nrows()
    }

    pub fn d(&self) -> usize {
        self.xs.ncols()
    }

    /// `(1/n) Σᵢ (gᵢᵀ (I − P) xᵢ)²` on the centered samples.
    pub fn objective(&self, subspace: &Subspace) -> Result<f64> {
        if subspace.d() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                got: subspace.d(),
            });
        }
        if subspace.k() == subspace.d() {
            return Ok(0.0);
        }
        let q = subspace.basis();
        let residual = &self.xs - (&self.xs * q) * q.transpose();
        let total: f64 = residual
            .row_iter()
            .zip(self.gs.row_iter())
            .map(|(r, g)| {
                let s = r.dot(&g);
                s * s
            })
            .sum();
        Ok(total / self.n() as f64)
    }
}

/// The loss surrogate `J(P) = E[(gᵀ(I − P)x)²]`, with both streams centered
/// by their own sample means.
pub fn objective_j(subspace: &Subspace, xs: &TensorBlock, gs: &TensorBlock) -> Result<f64> {
    CenteredPair::new(xs, gs)?.objective(subspace)
}
