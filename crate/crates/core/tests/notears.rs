mod common;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cicme::metrics::threshold;
use cicme::notears::{acyclicity, fit, FitOptions, Init, ModelConfig, ModelSet, SolverConfig, WeightedAdjacency};

fn random_adjacency(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |k, j| if k == j { 0.0 } else { rng.random_range(0.1..0.8) })
}

#[test]
fn acyclicity_matches_series_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for d in [2, 3, 5] {
        for _ in 0..5 {
            let w = random_adjacency(d, &mut rng);
            let got = acyclicity(&WeightedAdjacency::new(w.clone()).unwrap()).unwrap();
            let series = common::series_acyclicity(&w, 60);
            assert!((got.value - series).abs() <= 1e-5 * series.abs().max(1e-12), "{} vs {series}", got.value);
            let eps = 1e-6;
            for k in 0..d {
                for j in (0..d).filter(|&j| j != k) {
                    let mut up = w.clone();
                    up[(k, j)] += eps;
                    let mut down = w.clone();
                    down[(k, j)] -= eps;
                    let fd = (common::series_acyclicity(&up, 60) - common::series_acyclicity(&down, 60)) / (2.0 * eps);
                    let rel = (fd - got.grad[(k, j)]).abs() / fd.abs().max(1e-8);
                    assert!(rel <= 1e-5, "d={d} ({k},{j}): fd {fd} analytic {}", got.grad[(k, j)]);
                }
            }
        }
    }
}

#[test]
fn two_cycle_has_closed_form_value() {
    let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let h = acyclicity(&WeightedAdjacency::new(w.clone()).unwrap()).unwrap().value;
    let closed = 2.0 * 1f64.cosh() - 2.0;
    assert!((h - closed).abs() < 1e-12);
    assert!((common::series_acyclicity(&w, 40) - closed).abs() < 1e-12);
}

#[test]
fn objective_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = DMatrix::from_fn(20, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
    for (lambda1, seed) in [(0.0, 1), (0.01, 2)] {
        let config = ModelConfig { lambda1, ..ModelConfig::default() };
        let models = ModelSet::random(3, &config, seed);
        assert!(common::objective_fd_check(&models, &x, 1e-6) <= 1e-4);
    }
}

#[test]
fn identifiable_pair_matches_exhaustive_scoring() {
    for seed in 0..5 {
        let x = common::pair_data(1000, 100 + seed);
        let oracle = common::best_pair_structure(&x);
        assert_eq!(oracle, vec![(0, 1)]);
        let out = fit(&x, &ModelConfig::default(), &SolverConfig::default(), Init::Random(seed), &FitOptions::default())
            .unwrap();
        assert!(out.converged);
        assert!(out.h <= 1e-8);
        assert_eq!(threshold(&out.adjacency(), 0.3).unwrap().edges(), oracle, "seed {seed}");
    }
}
