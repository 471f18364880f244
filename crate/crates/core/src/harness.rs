//! Synthetic fixtures and a small analytic network for desk-scale checks.
//!
//! "Gain" throughout this module means reduction of the loss surrogate J,
//! `J_svd − J_fasc`. It is not a downstream accuracy number.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::compress::{fasc_subspace, svd_subspace, CenteredPair, FascConfig, Subspace};
use crate::diagnostics::{gate_layer, rho_correlation, rho_score, Gate, GateConfig, RhoFlag, RhoReport};
use crate::error::{Error, Result};
use crate::linalg::{sym_eigen_desc, symmetrize};
use crate::sketch::{derive_seed, subspace_overlap};
use crate::stats::CovarianceSet;
use crate::tensor_io::{write_tensor, LayerEntry, LayerRole, Manifest, TensorBlock, TensorKind};

/// Synthetic layer whose gradients load on a few low-variance axes.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub d: usize,
    pub planted_axes: Vec<usize>,
    pub variance_high: f64,
    pub variance_low: f64,
    pub gradient_gain: f64,
    pub noise: f64,
    pub n: usize,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            d: 3,
            planted_axes: vec![2],
            variance_high: 10.0,
            variance_low: 0.1,
            gradient_gain: 100.0,
            noise: 0.01,
            n: 1024,
            seed: 0,
        }
    }
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n < 2 {
            return Err(Error::InvalidConfig(format!("need d >= 1 and n >= 2, got d={} n={}", self.d, self.n)));
        }
        if let Some(&a) = self.planted_axes.iter().find(|&&a| a >= self.d) {
            return Err(Error::InvalidConfig(format!("planted axis {a} out of range for d={}", self.d)));
        }
        if !(self.variance_low > 0.0 && self.variance_low < self.variance_high) {
            return Err(Error::InvalidConfig("need 0 < variance_low < variance_high".into()));
        }
        if !(self.gradient_gain >= 0.0 && self.noise >= 0.0) {
            return Err(Error::InvalidConfig("gain and noise must be non-negative".into()));
        }
        Ok(())
    }

    fn is_planted(&self, j: usize) -> bool {
        self.planted_axes.contains(&j)
    }

    pub fn axis_variances(&self) -> Vec<f64> {
        (0..self.d)
            .map(|j| if self.is_planted(j) { self.variance_low } else { self.variance_high })
            .collect()
    }

    /// Population ρ of the generating distribution.
    pub fn population_rho(&self) -> f64 {
        let s = self.axis_variances();
        let (a, eta2) = (self.gradient_gain, self.noise * self.noise);
        let mut xg = 0.0;
        let mut gg = 0.0;
        for (j, &v) in s.iter().enumerate() {
            let (cxg, cgg) = if self.is_planted(j) {
                (a * v, a * a * v + eta2)
            } else {
                (0.0, eta2)
            };
            xg += cxg * cxg;
            gg += cgg * cgg;
        }
        let xx = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = xx.sqrt() * gg.sqrt().sqrt();
        if denom > 0.0 {
            xg.sqrt() / denom
        } else {
            0.0
        }
    }
}

/// Draws `(activations, gradients)`: x has per-axis variance
/// `variance_low` on planted axes and `variance_high` elsewhere;
/// `g = gain · x|planted + noise · N(0, I)`.
pub fn generate_planted(spec: &PlantedSpec, layer_id: u32) -> Result<(TensorBlock, TensorBlock)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sd: Vec<f64> = spec.axis_variances().iter().map(|v| v.sqrt()).collect();
    let (n, d) = (spec.n, spec.d);
    let mut x = DMatrix::zeros(n, d);
    let mut g = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[(i, j)] = sd[j] * z;
        }
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            g[(i, j)] = spec.noise * z;
            if spec.is_planted(j) {
                g[(i, j)] += spec.gradient_gain * x[(i, j)];
            }
        }
    }
    Ok((
        TensorBlock::from_matrix(layer_id, TensorKind::Activation, &x)?,
        TensorBlock::from_matrix(layer_id, TensorKind::Gradient, &g)?,
    ))
}

/// One layer's paired calibration samples.
#[derive(Debug, Clone)]
pub struct LayerSamples {
    pub layer_id: u32,
    pub role: LayerRole,
    pub xs: TensorBlock,
    pub gs: TensorBlock,
}

/// Multi-layer planted fixture with a linear gradient-gain ramp over layers.
#[derive(Debug, Clone, PartialEq)]
pub struct RampFixture {
    pub d: usize,
    pub n: usize,
    pub layers: usize,
    /// Fraction of axes (the last ones) carrying gradient signal.
    pub planted_fraction: f64,
    pub variance_high: f64,
    pub variance_low: f64,
    pub gain_min: f64,
    pub gain_max: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for RampFixture {
    fn default() -> Self {
        Self {
            d: 64,
            n: 2048,
            layers: 8,
            planted_fraction: 0.25,
            variance_high: 1.0,
            variance_low: 0.5,
            gain_min: 0.5,
            gain_max: 3.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl RampFixture {
    pub fn gain(&self, layer: usize) -> f64 {
        if self.layers <= 1 {
            self.gain_max
        } else {
            self.gain_min + (self.gain_max - self.gain_min) * layer as f64 / (self.layers - 1) as f64
        }
    }

    pub fn layer_spec(&self, layer: usize) -> PlantedSpec {
        let planted = ((self.planted_fraction * self.d as f64).round() as usize).clamp(1, self.d);
        PlantedSpec {
            d: self.d,
            planted_axes: (self.d - planted..self.d).collect(),
            variance_high: self.variance_high,
            variance_low: self.variance_low,
            gradient_gain: self.gain(layer),
            noise: self.noise,
            n: self.n,
            seed: derive_seed(self.seed, layer as u64),
        }
    }

    pub fn generate(&self) -> Result<Vec<LayerSamples>> {
        (0..self.layers)
            .map(|l| {
                let (xs, gs) = generate_planted(&self.layer_spec(l), l as u32)?;
                Ok(LayerSamples {
                    layer_id: l as u32,
                    role: LayerRole::Mlp,
                    xs,
                    gs,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Tanh,
    Relu,
}

impl Nonlinearity {
    fn apply(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => z.tanh(),
            Nonlinearity::Relu => z.max(0.0),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => 1.0 - z.tanh().powi(2),
            Nonlinearity::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// out × in
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Fully connected network with squared-error loss `‖y − t‖²` per sample.
/// The nonlinearity follows every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    layers: Vec<DenseLayer>,
    nonlinearity: Nonlinearity,
}

/// Per-layer inputs and loss gradients w.r.t. them; rows are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub activations: DMatrix<f64>,
    pub gradients: DMatrix<f64>,
}

impl LayerTrace {
    pub fn to_blocks(&self, layer_id: u32) -> Result<(TensorBlock, TensorBlock)> {
        Ok((
            TensorBlock::from_matrix(layer_id, TensorKind::Activation, &self.activations)?,
            TensorBlock::from_matrix(layer_id, TensorKind::Gradient, &self.gradients)?,
        ))
    }
}

pub const MAX_HESSIAN_WIDTH: usize = 64;
pub const FD_STEP: f64 = 1e-4;

impl ToyNet {
    pub fn new(layers: Vec<DenseLayer>, nonlinearity: Nonlinearity) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: l.weight.nrows(),
                    got: l.bias.len(),
                });
            }
            if let Some(next) = layers.get(i + 1) {
                if next.weight.ncols() != l.weight.nrows() {
                    return Err(Error::DimensionMismatch {
                        expected: l.weight.nrows(),
                        got: next.weight.ncols(),
                    });
                }
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { layers, nonlinearity })
    }

    /// Gaussian weights with standard deviation `scale / sqrt(fan_in)`, zero bias.
    pub fn random(sizes: &[usize], nonlinearity: Nonlinearity, scale: f64, seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidConfig("need at least input and output sizes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let sd = scale / (w[0] as f64).sqrt();
                DenseLayer {
                    weight: DMatrix::from_fn(w[1], w[0], |_, _| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        sd * z
                    }),
                    bias: DVector::zeros(w[1]),
                }
            })
            .collect();
        Self::new(layers, nonlinearity)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self, layer: usize) -> usize {
        self.layers[layer].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    fn is_last(&self, layer: usize) -> bool {
        layer + 1 == self.layers.len()
    }

    /// Forward pass starting at layer `from` with that layer's input `h`.
    /// Returns the inputs of every layer from `from` on, pre-activations,
    /// and the output.
    fn forward_from(&self, from: usize, h: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, DVector<f64>) {
        let mut inputs = Vec::with_capacity(self.layers.len() - from);
        let mut pre = Vec::with_capacity(self.layers.len() - from);
        let mut cur = h.clone();
        for l in from..self.layers.len() {
            let z = &self.layers[l].weight * &cur + &self.layers[l].bias;
            inputs.push(cur);
            cur = if self.is_last(l) {
                z.clone()
            } else {
                z.map(|v| self.nonlinearity.apply(v))
            };
            pre.push(z);
        }
        (inputs, pre, cur)
    }

    /// Per-sample loss with the activation entering `layer` set to `h`.
    pub fn loss_from(&self, layer: usize, h: &DVector<f64>, target: &DVector<f64>) -> f64 {
        let (_, _, y) = self.forward_from(layer, h);
        (y - target).norm_squared()
    }

    /// Loss gradients w.r.t. the inputs of layers `layer..`.
    fn backward_from(&self, layer: usize, h: &DVector<f64>, target: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let (inputs, pre, y) = self.forward_from(layer, h);
        let count = inputs.len();
        let mut grads = vec![DVector::zeros(0); count];
        let mut upstream = (y - target) * 2.0;
        for idx in (0..count).rev() {
            let l = layer + idx;
            let delta = if self.is_last(l) {
                upstream.clone()
            } else {
                upstream.component_mul(&pre[idx].map(|v| self.nonlinearity.derivative(v)))
            };
            upstream = self.layers[l].weight.transpose() * delta;
            grads[idx] = upstream.clone();
        }
        (inputs, grads)
    }

    pub fn activation_gradient(&self, layer: usize, h: &DVector<f64>, target: &DVector<f64>) -> DVector<f64> {
        let (_, grads) = self.backward_from(layer, h, target);
        grads.into_iter().next().unwrap_or_else(|| DVector::zeros(0))
    }
}

fn check_io_shapes(net: &ToyNet, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<()> {
    if inputs.ncols() != net.input_dim(0) {
        return Err(Error::DimensionMismatch {
            expected: net.input_dim(0),
            got: inputs.ncols(),
        });
    }
    if targets.ncols() != net.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: net.output_dim(),
            got: targets.ncols(),
        });
    }
    if inputs.nrows() != targets.nrows() {
        return Err(Error::SampleMismatch {
            expected: inputs.nrows(),
            got: targets.nrows(),
        });
    }
    Ok(())
}

/// Inputs of every layer and the per-sample loss gradients w.r.t. them.
pub fn toy_forward_backward(net: &ToyNet, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<Vec<LayerTrace>> {
    check_io_shapes(net, inputs, targets)?;
    let n = inputs.nrows();
    let mut traces: Vec<LayerTrace> = (0..net.layers.len())
        .map(|l| LayerTrace {
            activations: DMatrix::zeros(n, net.input_dim(l)),
            gradients: DMatrix::zeros(n, net.input_dim(l)),
        })
        .collect();
    for i in 0..n {
        let x = inputs.row(i).transpose();
        let t = targets.row(i).transpose();
        let (acts, grads) = net.backward_from(0, &x, &t);
        for (l, trace) in traces.iter_mut().enumerate() {
            trace.activations.set_row(i, &acts[l].transpose());
            trace.gradients.set_row(i, &grads[l].transpose());
        }
    }
    Ok(traces)
}

/// Empirical Fisher `(1/n) Σ gᵢ gᵢᵀ` (uncentered).
pub fn empirical_fisher(gradients: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(gradients.tr_mul(gradients) / gradients.nrows() as f64))
}

/// Hessian of the mean loss w.r.t. a perturbation shared by every sample's
/// input to `layer`, by central differences of the analytic gradient.
pub fn fd_activation_hessian(net: &ToyNet, inputs: &DMatrix<f64>, targets: &DMatrix<f64>, layer: usize, step: f64) -> Result<DMatrix<f64>> {
    check_io_shapes(net, inputs, targets)?;
    if layer >= net.layers.len() {
        return Err(Error::InvalidConfig(format!("layer {layer} out of range")));
    }
    let width = net.input_dim(layer);
    if width > MAX_HESSIAN_WIDTH {
        return Err(Error::WidthTooLarge {
            width,
            limit: MAX_HESSIAN_WIDTH,
        });
    }
    let traces = toy_forward_backward(net, inputs, targets)?;
    let acts = &traces[layer].activations;
    let n = inputs.nrows();
    let mean_grad = |shift: &DVector<f64>| -> DVector<f64> {
        let mut g = DVector::zeros(width);
        for i in 0..n {
            let h = acts.row(i).transpose() + shift;
            g += net.activation_gradient(layer, &h, &targets.row(i).transpose());
        }
        g / n as f64
    };
    let mut hess = DMatrix::zeros(width, width);
    for j in 0..width {
        let mut e = DVector::zeros(width);
        e[j] = step;
        let col = (mean_grad(&e) - mean_grad(&(-&e))) / (2.0 * step);
        hess.set_column(j, &col);
    }
    let hess = symmetrize(&hess);
    if hess.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteHessian);
    }
    Ok(hess)
}

/// Overlap of the top-k eigenspaces of two symmetric matrices.
pub fn top_k_overlap(a: &DMatrix<f64>, b: &DMatrix<f64>, k: usize) -> Result<f64> {
    use crate::compress::Method;
    let top = |m: &DMatrix<f64>| -> Result<Subspace> {
        let d = m.nrows();
        if k == 0 || k > d {
            return Err(Error::InvalidRank { k, d });
        }
        let (vals, vecs) = sym_eigen_desc(m);
        Subspace::new(vecs.columns(0, k).into_owned(), vals[..k].to_vec(), Method::Svd)
    };
    subspace_overlap(&top(a)?, &top(b)?)
}

/// Overlap between the top-k eigenspaces of the empirical Fisher and of the
/// finite-difference Hessian at `layer`'s input.
pub fn fim_hessian_overlap(net: &ToyNet, inputs: &DMatrix<f64>, targets: &DMatrix<f64>, layer: usize, k: usize) -> Result<f64> {
    let hess = fd_activation_hessian(net, inputs, targets, layer, FD_STEP)?;
    let traces = toy_forward_backward(net, inputs, targets)?;
    let fisher = empirical_fisher(&traces[layer].gradients);
    top_k_overlap(&fisher, &hess, k)
}

/// Rank for a fraction of d, rounded and clamped to `[1, d]`.
pub fn rank_for(rank_fraction: f64, d: usize) -> usize {
    ((rank_fraction * d as f64).round() as usize).clamp(1, d)
}

/// Exact-path quantities of one layer shared by the sweep and gain studies.
#[derive(Debug, Clone)]
struct LayerEval {
    layer_id: u32,
    role: LayerRole,
    report: RhoReport,
    j_svd: f64,
    j_fasc: Option<f64>,
    svd_ms: f64,
    fasc_ms: f64,
    error: Option<String>,
}

fn evaluate_layer(layer: &LayerSamples, rank_fraction: f64) -> Result<LayerEval> {
    let cov = CovarianceSet::from_blocks(&layer.xs, &layer.gs)?;
    let pair = CenteredPair::new(&layer.xs, &layer.gs)?;
    let k = rank_for(rank_fraction, cov.d);
    let mut report = match rho_score(&cov) {
        Ok(rho) => RhoReport {
            layer_id: layer.layer_id,
            rho,
            ci_low: rho,
            ci_high: rho,
            n: cov.n,
            gate: Gate::UseSvd,
            flags: Default::default(),
        },
        Err(Error::DegenerateGradients { .. }) => RhoReport::degenerate(layer.layer_id, cov.n),
        Err(e) => return Err(e),
    };
    let t = Instant::now();
    let j_svd = pair.objective(&svd_subspace(&cov, k)?)?;
    let svd_ms = t.elapsed().as_secs_f64() * 1e3;
    let t = Instant::now();
    let (j_fasc, error) = match fasc_subspace(&cov, k, &FascConfig::default()).and_then(|s| pair.objective(&s)) {
        Ok(j) => (Some(j), None),
        Err(e) => {
            if matches!(e, Error::DegenerateGradients { .. }) {
                report.flags.insert(RhoFlag::DegenerateGradients);
            }
            (None, Some(e.to_string()))
        }
    };
    let fasc_ms = t.elapsed().as_secs_f64() * 1e3;
    Ok(LayerEval {
        layer_id: layer.layer_id,
        role: layer.role,
        report,
        j_svd,
        j_fasc,
        svd_ms,
        fasc_ms,
        error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub threshold: f64,
    pub layer_id: u32,
    pub rho: f64,
    pub gate: Gate,
    pub j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub threshold: f64,
    pub fasc_layers: Vec<u32>,
    pub fasc_layer_count: usize,
    pub total_j: f64,
    pub solve_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rank_fraction: f64,
    pub records: Vec<SweepRecord>,
    pub summaries: Vec<SweepSummary>,
    pub fasc_count_non_increasing: bool,
    pub fasc_sets_nested: bool,
    pub total_j_non_decreasing: bool,
}

/// Gates every layer at each threshold (ascending) and totals J.
pub fn threshold_sweep(layers: &[LayerSamples], rank_fraction: f64, thresholds: &[f64], gate: &GateConfig) -> Result<SweepReport> {
    if layers.len() < 2 || thresholds.len() < 2 {
        return Err(Error::InvalidConfig("sweep needs at least 2 layers and 2 thresholds".into()));
    }
    let evals = layers
        .iter()
        .map(|l| evaluate_layer(l, rank_fraction))
        .collect::<Result<Vec<_>>>()?;
    let total_layers = layers.iter().map(|l| l.layer_id + 1).max().unwrap_or(0);
    let mut sorted = thresholds.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut records = Vec::new();
    let mut summaries = Vec::new();
    for &threshold in &sorted {
        let cfg = GateConfig { threshold, ..*gate };
        let mut fasc_layers = Vec::new();
        let (mut total_j, mut time) = (0.0, 0.0);
        for e in &evals {
            let mut g = gate_layer(&e.report, e.layer_id, e.role, total_layers, &cfg);
            if g == Gate::UseFasc && e.j_fasc.is_none() {
                g = Gate::UseSvd;
            }
            let j = match (g, e.j_fasc) {
                (Gate::UseFasc, Some(j)) => {
                    fasc_layers.push(e.layer_id);
                    time += e.fasc_ms;
                    j
                }
                _ => {
                    time += e.svd_ms;
                    e.j_svd
                }
            };
            total_j += j;
            records.push(SweepRecord {
                threshold,
                layer_id: e.layer_id,
                rho: e.report.rho,
                gate: g,
                j,
            });
        }
        summaries.push(SweepSummary {
            threshold,
            fasc_layer_count: fasc_layers.len(),
            fasc_layers,
            total_j,
            solve_time_ms: time,
        });
    }
    let pairs = || summaries.windows(2);
    Ok(SweepReport {
        rank_fraction,
        fasc_count_non_increasing: pairs().all(|w| w[1].fasc_layer_count <= w[0].fasc_layer_count),
        fasc_sets_nested: pairs().all(|w| w[1].fasc_layers.iter().all(|l| w[0].fasc_layers.contains(l))),
        total_j_non_decreasing: pairs().all(|w| w[1].total_j >= w[0].total_j),
        records,
        summaries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRecord {
    pub layer_id: u32,
    pub rho: f64,
    pub j_svd: f64,
    pub j_fasc: Option<f64>,
    pub gain: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub rank_fraction: f64,
    pub layers: Vec<GainRecord>,
    /// Pearson r between ρ and gain; `None` when undefined.
    pub pearson_r: Option<f64>,
    pub correlation_note: Option<String>,
    pub top_mean_gain: f64,
    pub bottom_mean_gain: f64,
}

/// Per-layer ρ against `J_svd − J_fasc`, their Pearson correlation, and the
/// mean gain of the top and bottom 20% of layers by ρ.
pub fn layer_gain_experiment(layers: &[LayerSamples], rank_fraction: f64) -> Result<GainReport> {
    if layers.len() < 4 {
        return Err(Error::InvalidConfig("gain experiment needs at least 4 layers".into()));
    }
    let records: Vec<GainRecord> = layers
        .iter()
        .map(|l| {
            let e = evaluate_layer(l, rank_fraction)?;
            Ok(GainRecord {
                layer_id: e.layer_id,
                rho: e.report.rho,
                j_svd: e.j_svd,
                j_fasc: e.j_fasc,
                gain: e.j_fasc.map(|j| e.j_svd - j),
                error: e.error,
            })
        })
        .collect::<Result<_>>()?;

    let mut scored: Vec<(f64, f64)> = records.iter().filter_map(|r| r.gain.map(|g| (r.rho, g))).collect();
    let rhos: Vec<f64> = scored.iter().map(|p| p.0).collect();
    let gains: Vec<f64> = scored.iter().map(|p| p.1).collect();
    let (pearson_r, correlation_note) = match rho_correlation(&rhos, &gains) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };

    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let tail = ((scored.len() as f64 * 0.2).ceil() as usize).max(1).min(scored.len());
    let mean = |s: &[(f64, f64)]| {
        if s.is_empty() {
            0.0
        } else {
            s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64
        }
    };
    Ok(GainReport {
        rank_fraction,
        pearson_r,
        correlation_note,
        top_mean_gain: mean(&scored[..tail]),
        bottom_mean_gain: mean(&scored[scored.len() - tail..]),
        layers: records,
    })
}

/// Correlation structure of a synthesized fixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    /// Gradients load on the low-variance axes with a per-layer gain ramp.
    Planted,
    /// `g = x` exactly.
    Identical,
    /// Gradients are independent standard normal noise.
    Independent,
}

impl RampFixture {
    /// The same fixture geometry with a different coupling structure.
    pub fn with_mode(&self, mode: SynthMode) -> RampFixture {
        match mode {
            SynthMode::Planted => self.clone(),
            SynthMode::Identical => RampFixture {
                planted_fraction: 1.0,
                gain_min: 1.0,
                gain_max: 1.0,
                noise: 0.0,
                ..self.clone()
            },
            SynthMode::Independent => RampFixture {
                gain_min: 0.0,
                gain_max: 0.0,
                noise: if self.noise > 0.0 { self.noise } else { 1.0 },
                ..self.clone()
            },
        }
    }
}

/// Writes each layer as `layer_NNN_act.bin` / `layer_NNN_grad.bin` under
/// `dir` plus a `manifest.json` with relative paths, returning the manifest.
pub fn write_fixture(layers: &[LayerSamples], dir: &Path, calibration_tag: &str) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(layers.len());
    for l in layers {
        let act = PathBuf::from(format!("layer_{:03}_act.bin", l.layer_id));
        let grad = PathBuf::from(format!("layer_{:03}_grad.bin", l.layer_id));
        write_tensor(&l.xs, dir.join(&act))?;
        write_tensor(&l.gs, dir.join(&grad))?;
        entries.push(LayerEntry {
            layer_id: l.layer_id,
            activation: act,
            gradient: grad,
            d: l.xs.d(),
            n: l.xs.n(),
            role: l.role,
        });
    }
    let manifest = Manifest::new(calibration_tag, entries).with_base_dir(dir);
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Loads every manifest layer into memory.
pub fn load_samples(manifest: &Manifest) -> Result<Vec<LayerSamples>> {
    manifest
        .layers
        .iter()
        .map(|e| {
            let (xs, gs) = manifest.load_layer(e)?;
            Ok(LayerSamples {
                layer_id: e.layer_id,
                role: e.role,
                xs,
                gs,
            })
        })
        .collect()
}
