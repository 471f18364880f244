//! Streaming, mergeable covariance triples (Σxx, Σgg, Σxg).
//!
//! An accumulator keeps raw first and second moment sums. Shards of a
//! stream can be accumulated independently and merged; centering happens
//! once, in [`CovAccumulator::finalize`], with population normalization 1/n.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::tensor_io::{check_paired, TensorBlock};

#[derive(Debug, Clone, PartialEq)]
pub struct CovAccumulator {
    d: usize,
    n: u64,
    sum_x: DVector<f64>,
    sum_g: DVector<f64>,
    sum_xx: DMatrix<f64>,
    sum_gg: DMatrix<f64>,
    sum_xg: DMatrix<f64>,
}

impl CovAccumulator {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            n: 0,
            sum_x: DVector::zeros(d),
            sum_g: DVector::zeros(d),
            sum_xx: DMatrix::zeros(d, d),
            sum_gg: DMatrix::zeros(d, d),
            sum_xg: DMatrix::zeros(d, d),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn sum_x(&self) -> &DVector<f64> {
        &self.sum_x
    }

    pub fn sum_g(&self) -> &DVector<f64> {
        &self.sum_g
    }

    pub fn sum_xx(&self) -> &DMatrix<f64> {
        &self.sum_xx
    }

    pub fn sum_gg(&self) -> &DMatrix<f64> {
        &self.sum_gg
    }

    /// Σ xᵢ gᵢᵀ.
    pub fn sum_xg(&self) -> &DMatrix<f64> {
        &self.sum_xg
    }

    /// Adds one (activation, gradient) sample pair.
    pub fn accumulate(&mut self, x: &[f64], g: &[f64]) -> Result<()> {
        for v in [x, g] {
            if v.len() != self.d {
                return Err(Error::DimensionMismatch {
                    expected: self.d,
                    got: v.len(),
                });
            }
        }
        if let Some(col) = x.iter().chain(g).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: self.n as usize,
                col: col % self.d,
            });
        }
        let x = DVector::from_column_slice(x);
        let g = DVector::from_column_slice(g);
        self.sum_x += &x;
        self.sum_g += &g;
        self.sum_xx.ger(1.0, &x, &x, 1.0);
        self.sum_gg.ger(1.0, &g, &g, 1.0);
        self.sum_xg.ger(1.0, &x, &g, 1.0);
        self.n += 1;
        Ok(())
    }

    /// Accumulates every row of a paired block.
    pub fn accumulate_blocks(&mut self, xs: &TensorBlock, gs: &TensorBlock) -> Result<()> {
        check_paired(xs, gs)?;
        for i in 0..xs.n() {
            self.accumulate(&xs.row_f64(i), &gs.row_f64(i))?;
        }
        Ok(())
    }

    /// Rows of two `n × d` sample matrices.
    pub fn accumulate_matrices(&mut self, xs: &DMatrix<f64>, gs: &DMatrix<f64>) -> Result<()> {
        if xs.shape() != gs.shape() {
            return Err(Error::SampleMismatch {
                expected: xs.nrows(),
                got: gs.nrows(),
            });
        }
        let mut x = vec![0.0; xs.ncols()];
        let mut g = vec![0.0; gs.ncols()];
        for i in 0..xs.nrows() {
            for j in 0..xs.ncols() {
                x[j] = xs[(i, j)];
                g[j] = gs[(i, j)];
            }
            self.accumulate(&x, &g)?;
        }
        Ok(())
    }

    /// Componentwise sum of the running sums of two shards.
    pub fn merge(&self, other: &CovAccumulator) -> Result<CovAccumulator> {
        if self.d != other.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: other.d,
            });
        }
        Ok(CovAccumulator {
            d: self.d,
            n: self.n + other.n,
            sum_x: &self.sum_x + &other.sum_x,
            sum_g: &self.sum_g + &other.sum_g,
            sum_xx: &self.sum_xx + &other.sum_xx,
            sum_gg: &self.sum_gg + &other.sum_gg,
            sum_xg: &self.sum_xg + &other.sum_xg,
        })
    }

    pub fn finalize(&self) -> Result<CovarianceSet> {
        if self.n < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                have: self.n as usize,
            });
        }
        let n = self.n as f64;
        let mean_x = &self.sum_x / n;
        let mean_g = &self.sum_g / n;
        let sigma_xx = symmetrize(&(&self.sum_xx / n - &mean_x * mean_x.transpose()));
        let sigma_gg = symmetrize(&(&self.sum_gg / n - &mean_g * mean_g.transpose()));
        let sigma_xg = &self.sum_xg / n - &mean_x * mean_g.transpose();
        Ok(CovarianceSet {
            d: self.d,
            n: self.n as usize,
            mean_x,
            mean_g,
            sigma_xx,
            sigma_gg,
            sigma_xg,
        })
    }
}

/// Centered empirical covariances of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSet {
    pub d: usize,
    pub n: usize,
    pub mean_x: DVector<f64>,
    pub mean_g: DVector<f64>,
    pub sigma_xx: DMatrix<f64>,
    pub sigma_gg: DMatrix<f64>,
    /// E[(x − x̄)(g − ḡ)ᵀ]
    pub sigma_xg: DMatrix<f64>,
}

impl CovarianceSet {
    pub fn from_blocks(xs: &TensorBlock, gs: &TensorBlock) -> Result<Self> {
        let mut acc = CovAccumulator::new(xs.d());
        acc.accumulate_blocks(xs, gs)?;
        acc.finalize()
    }

    pub fn from_matrices(xs: &DMatrix<f64>, gs: &DMatrix<f64>) -> Result<Self> {
        let mut acc = CovAccumulator::new(xs.ncols());
        acc.accumulate_matrices(xs, gs)?;
        acc.finalize()
    }
}
