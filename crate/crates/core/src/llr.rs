//! Local linear regression baseline.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bandwidth::fit_quartic;
use crate::error::{RdError, Result};
use crate::kernels::{one_sided_moments, KernelSpec, Side};
use crate::lcqr::window;
use crate::linalg::weighted_least_squares;
use crate::nuisance::estimate_sigma_fx;
use crate::sample::RdSample;
use crate::sandwich::SandwichMode;
use crate::sharp::{
    normal_quantile, pilot_bandwidth, relabel, two_sided_p, Bandwidths, CurvatureSource, Estimand,
    InferenceConfig, InferenceResult, Interval, SideDiagnostics,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlrFit {
    pub intercept: f64,
    pub slope: f64,
    pub cond_mean: f64,
    pub bandwidth: f64,
    pub n_effective: usize,
}

/// Kernel-weighted least squares of `y` on `(1, x - point)`.
pub fn fit_llr(
    x: &[f64],
    y: &[f64],
    point: f64,
    bandwidth: f64,
    kernel: &KernelSpec,
) -> Result<LlrFit> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(RdError::InvalidInput(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let (idx, u, w) = window(x, point, bandwidth, kernel);
    let mut distinct = u.clone();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(RdError::InsufficientData {
            side: if point >= 0.0 {
                "above".into()
            } else {
                "below".into()
            },
            have: distinct.len(),
            need: 2,
        });
    }
    let design = DMatrix::from_fn(
        idx.len(),
        2,
        |r, c| if c == 0 { 1.0 } else { u[r] * bandwidth },
    );
    let yy: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let beta = weighted_least_squares(&design, &yy, &w).ok_or(RdError::SingularDesign)?;
    Ok(LlrFit {
        intercept: beta[0],
        slope: beta[1],
        cond_mean: beta[0],
        bandwidth,
        n_effective: idx.len(),
    })
}

/// Per-side ingredients of the local linear MSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlrSide {
    pub fit: LlrFit,
    pub sigma: f64,
    pub fx: f64,
    pub m2: f64,
    pub pilot_bandwidth: f64,
    pub n: usize,
    pub a: f64,
    pub b: f64,
}

impl LlrSide {
    pub fn bias(&self) -> f64 {
        0.5 * self.a * self.m2 * self.fit.bandwidth.powi(2)
    }

    pub fn variance(&self) -> f64 {
        self.b * self.sigma * self.sigma / (self.n as f64 * self.fit.bandwidth * self.fx)
    }
}

fn llr_side(sample: &RdSample, side: Side, h: f64, cfg: &InferenceConfig) -> Result<LlrSide> {
    let d = sample.side(side);
    let fit = relabel(fit_llr(&d.x, &d.y, 0.0, h, &cfg.kernel), side)?;
    let pilot = relabel(pilot_bandwidth(&d.x, &d.y, side, cfg), side)?;
    let nuis = relabel(
        estimate_sigma_fx(&d.x, &d.y, side, pilot, &cfg.kernel),
        side,
    )?;
    let m2 = fit_quartic(&d.x, &d.y, side)?.second_derivative_at_cutoff();
    let mo = one_sided_moments(&cfg.kernel, side, 4)?;
    Ok(LlrSide {
        fit,
        sigma: nuis.sigma_at_cutoff,
        fx: nuis.fx_at_cutoff,
        m2,
        pilot_bandwidth: pilot,
        n: d.x.len(),
        a: mo.a(),
        b: mo.b(),
    })
}

/// Common MSE-optimal local linear bandwidth for the jump.
pub fn llr_mse_bandwidth(sample: &RdSample, cfg: &InferenceConfig) -> Result<f64> {
    let p = llr_side(sample, Side::Above, 1.0, cfg)?;
    let m = llr_side(sample, Side::Below, 1.0, cfg)?;
    let n = (p.n + m.n) as f64;
    let v = p.b * p.sigma.powi(2) / (p.fx * p.n as f64 / n)
        + m.b * m.sigma.powi(2) / (m.fx * m.n as f64 / n);
    let bias = 0.5 * (p.a * p.m2 - m.a * m.m2);
    if !(bias.abs() > 1e-12) {
        return Err(RdError::DegenerateCurvature);
    }
    Ok((v / (4.0 * bias * bias * n)).powf(0.2))
}

/// Local linear jump estimate with plain s.e. and a quartic-curvature bias correction.
pub fn llr_inference(
    sample: &RdSample,
    bw: &Bandwidths,
    cfg: &InferenceConfig,
) -> Result<InferenceResult> {
    let z = normal_quantile(cfg.level)?;
    let p = llr_side(sample, Side::Above, bw.h_plus, cfg)?;
    let m = llr_side(sample, Side::Below, bw.h_minus, cfg)?;
    let point = p.fit.cond_mean - m.fit.cond_mean;
    let bias_hat = p.bias() - m.bias();
    let var = p.variance() + m.variance();
    if !(var > 0.0) {
        return Err(RdError::DegenerateResiduals);
    }
    let se = var.sqrt();
    let point_bc = point - bias_hat;
    let t_adj = (point_bc - cfg.tau0) / se;
    let diag = |s: &LlrSide, side: Side| SideDiagnostics {
        side,
        bandwidth: s.fit.bandwidth,
        n_effective: s.fit.n_effective,
        sigma: s.sigma,
        fx: s.fx,
        pilot_bandwidth: s.pilot_bandwidth,
        second_derivative: s.m2,
        curvature_source: CurvatureSource::Quartic,
        converged: true,
    };
    Ok(InferenceResult {
        estimand: Estimand::Sharp,
        point,
        bias_hat,
        point_bc,
        se_plain: se,
        se_adjusted: se,
        t_plain: (point - cfg.tau0) / se,
        t_adjusted: t_adj,
        p_value_adjusted: two_sided_p(t_adj),
        ci_plain: Interval::centered(point, z * se),
        ci_adjusted: Interval::centered(point_bc, z * se),
        level: cfg.level,
        mode: SandwichMode::Asymptotic,
        tau0: cfg.tau0,
        bandwidths: *bw,
        n_eff: vec![p.fit.n_effective, m.fit.n_effective],
        sides: vec![diag(&p, Side::Above), diag(&m, Side::Below)],
        notes: vec!["in-house local linear baseline; s.e. not adjusted for bias correction".into()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_line() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 50.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 3.0 * v).collect();
        let f = fit_llr(&x, &y, 0.0, 0.5, &KernelSpec::triangular()).unwrap();
        assert!((f.intercept - 2.0).abs() < 1e-12);
        assert!((f.slope + 3.0).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_normal_equations() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let y: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| v * v + (i as f64).cos())
            .collect();
        let k = KernelSpec::triangular();
        let h = 0.6;
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (xi, yi) in x.iter().zip(&y) {
            let w = k.eval(xi / h);
            s0 += w;
            s1 += w * xi;
            s2 += w * xi * xi;
            t0 += w * yi;
            t1 += w * xi * yi;
        }
        let det = s0 * s2 - s1 * s1;
        let a = (s2 * t0 - s1 * t1) / det;
        let b = (s0 * t1 - s1 * t0) / det;
        let f = fit_llr(&x, &y, 0.0, h, &k).unwrap();
        assert!((f.intercept - a).abs() < 1e-10);
        assert!((f.slope - b).abs() < 1e-10);
    }

    #[test]
    fn uniform_wide_window_is_ols() {
        let x: Vec<f64> = (0..30).map(|i| i as f64 / 30.0).collect();
        let y: Vec<f64> = x.iter().map(|v| (5.0 * v).sin()).collect();
        let f = fit_llr(
            &x,
            &y,
            0.0,
            10.0,
            &KernelSpec::new(crate::kernels::KernelFamily::Uniform),
        )
        .unwrap();
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((f.slope - slope).abs() < 1e-10);
        assert!((f.intercept - (my - slope * mx)).abs() < 1e-10);
    }

    #[test]
    fn triangular_variance_constant() {
        let mo = one_sided_moments(&KernelSpec::triangular(), Side::Above, 4).unwrap();
        assert!((mo.b() - 4.8).abs() < 1e-12);
    }
}
