use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdlcqr::lcqr::quantile_levels;

/// Exact minimum of the composite check loss via its linear-programming form.
pub fn lp_minimum(y: &[f64], w: &[f64], design: &[f64], m: usize, taus: &[f64]) -> f64 {
    let n = y.len();
    let q = taus.len();
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let theta: Vec<_> = (0..q + m)
        .map(|_| lp.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    for (k, &tau) in taus.iter().enumerate() {
        for i in 0..n {
            let up = lp.add_var(w[i] * tau, (0.0, f64::INFINITY));
            let dn = lp.add_var(w[i] * (1.0 - tau), (0.0, f64::INFINITY));
            let mut expr = vec![(theta[k], 1.0), (up, 1.0), (dn, -1.0)];
            for j in 0..m {
                expr.push((theta[q + j], design[i * m + j]));
            }
            lp.add_constraint(&expr[..], ComparisonOp::Eq, y[i]);
        }
    }
    lp.solve().expect("lp solves").objective()
}

pub fn random_instance(seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>, usize, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = [1usize, 3, 5][rng.random_range(0..3)];
    let p = rng.random_range(1..=2usize);
    let n = rng.random_range((q + p + 2)..=25);
    let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let y: Vec<f64> = u
        .iter()
        .map(|&v| 1.0 + 0.5 * v - v * v + (rng.random::<f64>() - 0.5) * 2.0)
        .collect();
    let w: Vec<f64> = u.iter().map(|&v| 1.0 - v).collect();
    let mut design = Vec::new();
    for &v in &u {
        for j in 1..=p {
            design.push(v.powi(j as i32));
        }
    }
    (y, w, design, p, quantile_levels(q))
}
