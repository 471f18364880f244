mod common;

use common::*;
use fasc::compress::CenteredPair;
use fasc::harness::{generate_planted, PlantedSpec};
use fasc::sketch::{sketched_fasc_subspace, sketched_fasc_traced, subspace_overlap, SketchConfig};
use fasc::stats::CovarianceSet;
use fasc::{fasc_subspace, Error, FascConfig};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn identity_sketch_matches_exact_solve() {
    for seed in 0..5 {
        let (x, g) = random_instance(12, 256, seed);
        let (xb, gb) = blocks(&x, &g);
        let cfg = FascConfig::default();
        let exact = fasc_subspace(&CovarianceSet::from_blocks(&xb, &gb).unwrap(), 4, &cfg).unwrap();
        let id = sketched_fasc_subspace(&xb, &gb, 4, &SketchConfig::identity(12), &cfg).unwrap();
        assert!(subspace_overlap(&exact, &id).unwrap() >= 0.999);
    }
}

#[test]
fn planted_axis_survives_a_full_size_gaussian_sketch() {
    let (xs, gs) = generate_planted(&PlantedSpec::default(), 0).unwrap();
    let s = sketched_fasc_subspace(&xs, &gs, 1, &SketchConfig::gaussian(3, 11), &FascConfig::default()).unwrap();
    assert!(s.basis()[(2, 0)].abs() >= 0.95, "basis {}", s.basis());
}

#[test]
fn larger_sketches_track_the_exact_solution_better() {
    let spec = PlantedSpec {
        d: 64,
        planted_axes: (60..64).collect(),
        variance_high: 1.0,
        variance_low: 0.5,
        gradient_gain: 2.0,
        noise: 1.0,
        n: 2048,
        seed: 21,
    };
    let (xs, gs) = generate_planted(&spec, 0).unwrap();
    let cfg = FascConfig::default();
    let exact = fasc_subspace(&CovarianceSet::from_blocks(&xs, &gs).unwrap(), 4, &cfg).unwrap();
    let mean = |m: usize| {
        (0..20)
            .map(|seed| {
                let s = sketched_fasc_subspace(&xs, &gs, 4, &SketchConfig::gaussian(m, seed), &cfg).unwrap();
                subspace_overlap(&s, &exact).unwrap()
            })
            .sum::<f64>()
            / 20.0
    };
    let (m8, m16, m64) = (mean(8), mean(16), mean(64));
    assert!(m16 >= m8, "m=16 {m16} vs m=8 {m8}");
    assert!(m64 >= m16, "m=64 {m64} vs m=16 {m16}");
}

#[test]
fn wide_layers_never_build_a_full_width_covariance() {
    let (n, d, k, m) = (48, 4096, 4, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(4096);
    let x = gaussian_matrix(&mut rng, n, d);
    let g = &x * 0.5 + gaussian_matrix(&mut rng, n, d);
    let pair = CenteredPair::from_matrices(x, g);
    let (s, trace) = sketched_fasc_traced(&pair, k, &SketchConfig::gaussian(m, 1), &FascConfig::default()).unwrap();
    assert_eq!(s.basis().shape(), (d, k));
    assert_projector_laws(&s);
    assert!(trace.largest_square() <= m, "shapes {:?}", trace.shapes);
    assert!(trace.shapes.iter().all(|&(r, c)| !(r == d && c == d)));
}

#[test]
fn sketch_size_must_cover_the_rank() {
    let (x, g) = random_instance(8, 64, 3);
    let (xb, gb) = blocks(&x, &g);
    let err = sketched_fasc_subspace(&xb, &gb, 4, &SketchConfig::gaussian(3, 0), &FascConfig::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)));
}

#[test]
fn different_seeds_draw_different_maps() {
    let (x, g) = random_instance(16, 128, 5);
    let (xb, gb) = blocks(&x, &g);
    let cfg = FascConfig::default();
    let a = sketched_fasc_subspace(&xb, &gb, 2, &SketchConfig::gaussian(8, 1), &cfg).unwrap();
    let b = sketched_fasc_subspace(&xb, &gb, 2, &SketchConfig::gaussian(8, 2), &cfg).unwrap();
    assert_ne!(a.basis(), b.basis());
    let _: &DMatrix<f64> = a.basis();
}
