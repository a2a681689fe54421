mod common;

use common::{lp_minimum, random_instance};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdlcqr::kernels::KernelSpec;
use rdlcqr::lcqr::{composite_objective, fit_boundary, solve_composite, SolverOptions};

#[test]
fn mm_matches_lp_oracle_on_random_instances() {
    let opts = SolverOptions {
        record_trace: true,
        ..Default::default()
    };
    for seed in 0..100 {
        let (y, w, design, m, taus) = random_instance(seed);
        let sol = solve_composite(&y, &w, &design, m, &taus, &opts).unwrap();
        let exact = lp_minimum(&y, &w, &design, m, &taus);
        let rel = (sol.objective - exact).abs() / exact.abs().max(1e-12);
        assert!(rel < 1e-8, "seed {seed}: {} vs {exact}", sol.objective);
        for pair in sol.trace.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-12 * pair[0].abs(),
                "seed {seed}: trace rises"
            );
        }
    }
}

#[test]
fn median_regression_matches_lp() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
    let y: Vec<f64> = x.iter().map(|v| v + rng.random::<f64>()).collect();
    let k = KernelSpec::triangular();
    let fit = fit_boundary(&x, &y, 0.0, 1, 1, 1.5, &k, &SolverOptions::default()).unwrap();
    let w: Vec<f64> = x.iter().map(|v| k.eval(v / 1.5)).collect();
    let design: Vec<f64> = x.iter().map(|v| v / 1.5).collect();
    let exact = lp_minimum(&y, &w, &design, 1, &[0.5]);
    assert!((fit.objective_value - exact).abs() < 1e-9 * exact);
}

#[test]
fn n20_q3_cond_mean_matches_oracle_vertex() {
    // The LP optimum value equals the objective at the fitted parameters, and
    // perturbing the fit in any coordinate never lowers the objective.
    let (y, w, design, m, taus) = random_instance(1234);
    let sol = solve_composite(&y, &w, &design, m, &taus, &SolverOptions::default()).unwrap();
    let base = composite_objective(&y, &w, &design, m, &taus, &sol.intercepts, &sol.slopes);
    for c in 0..taus.len() + m {
        for h in [1e-5, -1e-5] {
            let mut a = sol.intercepts.clone();
            let mut b = sol.slopes.clone();
            if c < a.len() {
                a[c] += h;
            } else {
                b[c - a.len()] += h;
            }
            assert!(composite_objective(&y, &w, &design, m, &taus, &a, &b) >= base - 1e-12);
        }
    }
}

fn fit_data(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|v| (2.0 * v).sin() + rng.random::<f64>())
        .collect();
    (x, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn location_equivariance(seed in 0u64..1000, shift in -5.0f64..5.0) {
        let (x, y) = fit_data(seed, 30);
        let k = KernelSpec::triangular();
        let o = SolverOptions::default();
        let a = fit_boundary(&x, &y, 0.0, 3, 1, 0.8, &k, &o).unwrap();
        let ys: Vec<f64> = y.iter().map(|v| v + shift).collect();
        let b = fit_boundary(&x, &ys, 0.0, 3, 1, 0.8, &k, &o).unwrap();
        for (u, v) in a.intercepts.iter().zip(&b.intercepts) {
            prop_assert!((v - u - shift).abs() < 1e-7);
        }
        prop_assert!((a.slopes[0] - b.slopes[0]).abs() < 1e-7);
    }

    #[test]
    fn scale_equivariance(seed in 0u64..1000, s in 0.1f64..10.0) {
        let (x, y) = fit_data(seed, 30);
        let k = KernelSpec::triangular();
        let o = SolverOptions::default();
        let a = fit_boundary(&x, &y, 0.0, 3, 2, 0.8, &k, &o).unwrap();
        let ys: Vec<f64> = y.iter().map(|v| v * s).collect();
        let b = fit_boundary(&x, &ys, 0.0, 3, 2, 0.8, &k, &o).unwrap();
        prop_assert!((b.cond_mean - s * a.cond_mean).abs() < 1e-7 * s.max(1.0));
        for (u, v) in a.slopes.iter().zip(&b.slopes) {
            prop_assert!((v - s * u).abs() < 1e-6 * s.max(1.0) * (1.0 + u.abs()));
        }
    }

    #[test]
    fn q_independence_without_noise(c0 in -2.0f64..2.0, c1 in -2.0f64..2.0, c2 in -2.0f64..2.0) {
        let x: Vec<f64> = (0..25).map(|i| i as f64 / 25.0).collect();
        let y: Vec<f64> = x.iter().map(|v| c0 + c1 * v + c2 * v * v).collect();
        let k = KernelSpec::triangular();
        let o = SolverOptions::default();
        let means: Vec<f64> = [1usize, 2, 5, 9]
            .iter()
            .map(|&q| fit_boundary(&x, &y, 0.0, q, 2, 1.0, &k, &o).unwrap().cond_mean)
            .collect();
        for m in &means {
            prop_assert!((m - c0).abs() < 1e-8);
        }
    }
}
