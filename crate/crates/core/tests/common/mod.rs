//! Independent oracles and fixtures shared by the integration tests.
//!
//! Nothing here calls the crate's linear algebra: covariances, the
//! generalized eigensolve and J are computed with explicit loops.
#![allow(dead_code)]

use fasc::tensor_io::{TensorBlock, TensorKind};
use fasc::Subspace;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

/// Correlated activations with a random rotated spectrum (condition number
/// at most 225, so eigenvalue truncation never triggers) and gradients
/// coupled through a random linear map plus noise.
pub fn random_instance(d: usize, n: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix = gram_schmidt(&gaussian_matrix(&mut rng, d, d));
    let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..3.0)).collect();
    let mut z = gaussian_matrix(&mut rng, n, d);
    for (j, s) in scales.iter().enumerate() {
        z.column_mut(j).scale_mut(*s);
    }
    let x = &z * &mix;
    let coupling = gaussian_matrix(&mut rng, d, d);
    let noise = gaussian_matrix(&mut rng, n, d) * 0.3;
    let g = &x * coupling + noise;
    (x, g)
}

/// Round-trips through f32 blocks so oracles see exactly what the crate sees.
pub fn blocks(x: &DMatrix<f64>, g: &DMatrix<f64>) -> (TensorBlock, TensorBlock) {
    (
        TensorBlock::from_matrix(0, TensorKind::Activation, x).unwrap(),
        TensorBlock::from_matrix(0, TensorKind::Gradient, g).unwrap(),
    )
}

pub fn f32_view(b: &TensorBlock) -> DMatrix<f64> {
    DMatrix::from_fn(b.n(), b.d(), |i, j| b.data()[i * b.d() + j] as f64)
}

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = m.shape();
    let mut out = m.clone();
    for j in 0..d {
        let mut mean = 0.0;
        for i in 0..n {
            mean += m[(i, j)];
        }
        mean /= n as f64;
        for i in 0..n {
            out[(i, j)] -= mean;
        }
    }
    out
}

/// Population-normalized (xx, gg, xg) by explicit summation.
pub fn dense_cov(x: &DMatrix<f64>, g: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    let (xc, gc) = (centered(x), centered(g));
    let mut xx = DMatrix::zeros(d, d);
    let mut gg = DMatrix::zeros(d, d);
    let mut xg = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
            for i in 0..n {
                s1 += xc[(i, a)] * xc[(i, b)];
                s2 += gc[(i, a)] * gc[(i, b)];
                s3 += xc[(i, a)] * gc[(i, b)];
            }
            xx[(a, b)] = s1 / n as f64;
            gg[(a, b)] = s2 / n as f64;
            xg[(a, b)] = s3 / n as f64;
        }
    }
    (xx, gg, xg)
}

pub fn cholesky(a: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.nrows();
    let mut l = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for p in 0..j {
                s -= l[(i, p)] * l[(j, p)];
            }
            if i == j {
                assert!(s > 0.0, "matrix not positive definite");
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    l
}

/// Solves `L Y = B` for lower-triangular L.
fn forward_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, c) = b.shape();
    let mut y = DMatrix::zeros(d, c);
    for col in 0..c {
        for i in 0..d {
            let mut s = b[(i, col)];
            for p in 0..i {
                s -= l[(i, p)] * y[(p, col)];
            }
            y[(i, col)] = s / l[(i, i)];
        }
    }
    y
}

/// Solves `Lᵀ Y = B` for lower-triangular L.
fn backward_solve_t(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, c) = b.shape();
    let mut y = DMatrix::zeros(d, c);
    for col in 0..c {
        for i in (0..d).rev() {
            let mut s = b[(i, col)];
            for p in i + 1..d {
                s -= l[(p, i)] * y[(p, col)];
            }
            y[(i, col)] = s / l[(i, i)];
        }
    }
    y
}

/// Cyclic Jacobi; eigenvalues descending with matching columns.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let d = a.nrows();
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(d, d);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in p + 1..d {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off < 1e-30 * (1.0 + m.norm_squared()) {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if m[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..d {
                    let (mrp, mrq) = (m[(r, p)], m[(r, q)]);
                    m[(r, p)] = c * mrp - s * mrq;
                    m[(r, q)] = s * mrp + c * mrq;
                }
                for r in 0..d {
                    let (mpr, mqr) = (m[(p, r)], m[(q, r)]);
                    m[(p, r)] = c * mpr - s * mqr;
                    m[(q, r)] = s * mpr + c * mqr;
                }
                for r in 0..d {
                    let (vrp, vrq) = (v[(r, p)], v[(r, q)]);
                    v[(r, p)] = c * vrp - s * vrq;
                    v[(r, q)] = s * vrp + c * vrq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let vals = order.iter().map(|&i| m[(i, i)]).collect();
    let vecs = DMatrix::from_fn(d, d, |r, c| v[(r, order[c])]);
    (vals, vecs)
}

/// Modified Gram–Schmidt on the columns.
pub fn gram_schmidt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut q = a.clone();
    for j in 0..q.ncols() {
        for p in 0..j {
            let dot = q.column(p).dot(&q.column(j));
            let proj = q.column(p) * dot;
            let mut col = q.column_mut(j);
            col -= proj;
        }
        let norm = q.column(j).norm();
        q.column_mut(j).scale_mut(1.0 / norm);
    }
    q
}

/// Top-k generalized eigenvectors of `Σxg Σgg Σxgᵀ v = λ (Σxx + εI) v`,
/// orthonormalized.
pub fn oracle_fasc_basis(x: &DMatrix<f64>, g: &DMatrix<f64>, k: usize, eps: f64) -> DMatrix<f64> {
    let (xx, gg, xg) = dense_cov(x, g);
    let d = xx.nrows();
    let b = &xx + DMatrix::identity(d, d) * eps;
    let a = &xg * &gg * xg.transpose();
    let l = cholesky(&b);
    let y = forward_solve(&l, &a);
    let c = forward_solve(&l, &y.transpose());
    let c = (&c + c.transpose()) * 0.5;
    let (_, u) = jacobi_eigen(&c);
    let v = backward_solve_t(&l, &u.columns(0, k).into_owned());
    gram_schmidt(&v)
}

/// `(1/n) Σ (gᵢᵀ (I − QQᵀ) xᵢ)²` on centered data, by loops.
pub fn brute_j(x: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    let (n, d) = x.shape();
    let (xc, gc) = (centered(x), centered(g));
    let k = q.ncols();
    let mut total = 0.0;
    for i in 0..n {
        let mut coeff = vec![0.0; k];
        for c in 0..k {
            for r in 0..d {
                coeff[c] += q[(r, c)] * xc[(i, r)];
            }
        }
        let mut s = 0.0;
        for r in 0..d {
            let mut proj = 0.0;
            for c in 0..k {
                proj += q[(r, c)] * coeff[c];
            }
            s += gc[(i, r)] * (xc[(i, r)] - proj);
        }
        total += s * s;
    }
    total / n as f64
}

pub fn overlap(qa: &DMatrix<f64>, qb: &DMatrix<f64>) -> f64 {
    (qa.transpose() * qb).norm_squared() / qa.ncols() as f64
}

/// Asserts the projector laws at the suite-wide tolerances.
pub fn assert_projector_laws(s: &Subspace) {
    let q = s.basis();
    let p = q * q.transpose();
    let idem = (&p * &p - &p).norm();
    let sym = (&p - p.transpose()).norm();
    let trace = (p.trace() - s.k() as f64).abs();
    assert!(idem <= 1e-10, "idempotence defect {idem:e}");
    assert!(sym <= 1e-12, "symmetry defect {sym:e}");
    assert!(trace <= 1e-8, "trace defect {trace:e}");
}

pub fn axis_subspace(d: usize, axes: &[usize]) -> Subspace {
    let mut b = DMatrix::zeros(d, axes.len());
    for (c, &a) in axes.iter().enumerate() {
        b[(a, c)] = 1.0;
    }
    Subspace::new(b, vec![1.0; axes.len()], fasc::Method::Svd).unwrap()
}
