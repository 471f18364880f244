//! Randomized cross-covariance sketch.
//!
//! Centered activations and gradients are multiplied by independent
//! Gaussian maps `R₁, R₂ ∈ ℝ^{d×m}` (entries N(0, 1/m)), the Fisher-aligned
//! problem is solved on the m-dimensional sketches, and the sketch-space
//! basis `w` is lifted back as `R₁ w` and re-orthonormalized.
//!
//! Random maps come from ChaCha8 seeded with the configured seed; R₁ is
//! drawn first, then R₂, each filled row-major. Per-layer seeds are derived
//! from a master seed with [`derive_seed`].

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::compress::{fasc_subspace, CenteredPair, FascConfig, Subspace};
use crate::error::{Error, Result};
use crate::linalg::orthonormalize;
use crate::stats::CovarianceSet;
use crate::tensor_io::TensorBlock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SketchMode {
    Gaussian,
    /// `R₁ = R₂ = I`; requires `m == d`. Used to check the lift.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SketchConfig {
    pub m: usize,
    pub seed: u64,
    pub rho_gate: f64,
    pub m_low_factor: usize,
    pub mode: SketchMode,
}

impl Default for SketchConfig {
    fn default() -> Self {
        Self {
            m: 0,
            seed: 0,
            rho_gate: 0.3,
            m_low_factor: 2,
            mode: SketchMode::Gaussian,
        }
    }
}

impl SketchConfig {
    pub fn gaussian(m: usize, seed: u64) -> Self {
        Self {
            m,
            seed,
            ..Self::default()
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            m: d,
            mode: SketchMode::Identity,
            ..Self::default()
        }
    }
}

/// SplitMix64 finalizer over `master + stream`, for independent per-layer
/// or per-resample RNG streams.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `m_low_factor · k` for weakly coupled layers, `min(4k, ⌊d/2⌋)` (but at
/// least k) otherwise; always clamped to `[k, d]`.
pub fn choose_sketch_size(rho: f64, k: usize, d: usize, cfg: &SketchConfig) -> usize {
    let m = if rho <= cfg.rho_gate {
        cfg.m_low_factor * k
    } else {
        (4 * k).min((d / 2).max(k))
    };
    m.clamp(k, d)
}

/// Shapes of every matrix materialized by a sketched solve, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SketchTrace {
    pub shapes: Vec<(usize, usize)>,
}

impl SketchTrace {
    fn record(&mut self, m: &DMatrix<f64>) {
        self.shapes.push(m.shape());
    }

    pub fn largest_square(&self) -> usize {
        self.shapes
            .iter()
            .filter(|(r, c)| r == c)
            .map(|&(r, _)| r)
            .max()
            .unwrap_or(0)
    }
}

fn gaussian_map(rng: &mut ChaCha8Rng, d: usize, m: usize) -> DMatrix<f64> {
    let scale = 1.0 / (m as f64).sqrt();
    DMatrix::from_row_iterator(
        d,
        m,
        (0..d * m).map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        }),
    )
}

pub fn sketched_fasc_subspace(
    xs: &TensorBlock,
    gs: &TensorBlock,
    k: usize,
    cfg: &SketchConfig,
    fasc_cfg: &FascConfig,
) -> Result<Subspace> {
    sketched_fasc_traced(&CenteredPair::new(xs, gs)?, k, cfg, fasc_cfg).map(|(s, _)| s)
}

/// Sketched solve on already-centered samples, also returning the shapes of
/// the intermediates it allocated.
pub fn sketched_fasc_traced(
    pair: &CenteredPair,
    k: usize,
    cfg: &SketchConfig,
    fasc_cfg: &FascConfig,
) -> Result<(Subspace, SketchTrace)> {
    let d = pair.d();
    let m = cfg.m;
    if k == 0 || k > d {
        return Err(Error::InvalidRank { k, d });
    }
    if m < k || m > d {
        return Err(Error::InvalidConfig(format!("sketch size m={m} must satisfy k={k} <= m <= d={d}")));
    }
    let mut trace = SketchTrace::default();
    trace.record(&pair.xs);
    trace.record(&pair.gs);

    let (r1, r2) = match cfg.mode {
        SketchMode::Gaussian => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let r1 = gaussian_map(&mut rng, d, m);
            let r2 = gaussian_map(&mut rng, d, m);
            (r1, r2)
        }
        SketchMode::Identity => {
            if m != d {
                return Err(Error::InvalidConfig("identity sketch requires m == d".into()));
            }
            (DMatrix::identity(d, d), DMatrix::identity(d, d))
        }
    };
    trace.record(&r1);
    trace.record(&r2);

    let x_sketch = &pair.xs * &r1;
    let g_sketch = &pair.gs * &r2;
    trace.record(&x_sketch);
    trace.record(&g_sketch);

    let cov = CovarianceSet::from_matrices(&x_sketch, &g_sketch)?;
    trace.record(&cov.sigma_xx);
    trace.record(&cov.sigma_gg);
    trace.record(&cov.sigma_xg);
    let small = fasc_subspace(&cov, k, fasc_cfg)?;
    trace.record(small.basis());

    let lifted = &r1 * small.basis();
    trace.record(&lifted);
    let basis = orthonormalize(&lifted);
    trace.record(&basis);
    let s = Subspace::new(basis, small.eigenvalues().to_vec(), small.method())?.with_seed(cfg.seed);
    Ok((s, trace))
}

/// Mean squared cosine of the principal angles, `‖Q_aᵀ Q_b‖²_F / k`.
pub fn subspace_overlap(a: &Subspace, b: &Subspace) -> Result<f64> {
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
    Ok((cross.norm_squared() / a.k() as f64).clamp(0.0, 1.0))
}
