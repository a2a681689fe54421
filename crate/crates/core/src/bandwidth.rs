//! Bandwidth selection: the adjusted-MSE rule (per side or a common
//! bandwidth for both sides) seeded by a rule-of-thumb pilot.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};
use crate::kernels::{one_sided_moments, roughness_and_second_moment, KernelSpec, Side};
use crate::linalg::weighted_least_squares;
use crate::nuisance::estimate_nuisances;
use crate::quadrature::integrate;
use crate::sample::RdSample;
use crate::sandwich::constants;

/// Polynomial order whose fit the bandwidth floor must support.
const FLOOR_ORDER: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMethod {
    AdjMseTwo,
    AdjMseEqual,
    Rot,
    Fixed,
}

/// Global quartic least-squares fit on one side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarticFit {
    /// Coefficients on `x^0..x^4`, with `x` centered at the cutoff.
    pub coef: Vec<f64>,
    pub sigma2: f64,
    /// `sum_i m''(X_i)^2`.
    pub curvature_ss: f64,
    pub range: f64,
    pub n: usize,
}

impl QuarticFit {
    pub fn second_derivative_at_cutoff(&self) -> f64 {
        2.0 * self.coef[2]
    }

    pub fn third_derivative_at_cutoff(&self) -> f64 {
        6.0 * self.coef[3]
    }
}

pub fn fit_quartic(x: &[f64], y: &[f64], side: Side) -> Result<QuarticFit> {
    let n = x.len();
    if n < 10 {
        return Err(RdError::InsufficientData {
            side: side.name().into(),
            have: n,
            need: 10,
        });
    }
    let design = DMatrix::from_fn(n, 5, |r, c| x[r].powi(c as i32));
    let w = vec![1.0; n];
    let beta = weighted_least_squares(&design, y, &w).ok_or(RdError::SingularDesign)?;
    let coef: Vec<f64> = beta.iter().copied().collect();
    let ssr: f64 = (0..n)
        .map(|i| {
            let fit: f64 = (0..5).map(|j| coef[j] * x[i].powi(j as i32)).sum();
            (y[i] - fit).powi(2)
        })
        .sum();
    let curvature_ss = x
        .iter()
        .map(|&v| (2.0 * coef[2] + 6.0 * coef[3] * v + 12.0 * coef[4] * v * v).powi(2))
        .sum();
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    Ok(QuarticFit {
        coef,
        sigma2: ssr / (n - 5) as f64,
        curvature_ss,
        range: hi - lo,
        n,
    })
}

/// `(R(K) / mu2(K)^2)^(1/5)` for the local linear rule of thumb.
pub fn rot_kernel_constant(kernel: &KernelSpec) -> f64 {
    let (r, m2) = roughness_and_second_moment(kernel);
    (r / (m2 * m2)).powf(0.2)
}

/// `C_K [sigma^2 L / sum m''(X_i)^2]^(1/5)` before clamping.
pub fn rot_from_constants(
    kernel_constant: f64,
    sigma2: f64,
    support_length: f64,
    curvature_ss: f64,
) -> f64 {
    kernel_constant * (sigma2 * support_length / curvature_ss).powf(0.2)
}

/// Clamp to `[spacing (q + p + 1), range]`.
pub fn clamp_bandwidth(h: f64, range: f64, n: usize, q: usize) -> f64 {
    let floor = range / n as f64 * (q + FLOOR_ORDER + 1) as f64;
    if h.is_nan() {
        return range;
    }
    h.max(floor.min(range)).min(range)
}

/// `(C3 / (6 C2^2))^(1/7) n^(-1/7)`.
pub fn adj_mse_from_constants(c2: f64, c3: f64, n: f64) -> f64 {
    (c3 / (6.0 * c2 * c2)).powf(1.0 / 7.0) * n.powf(-1.0 / 7.0)
}

/// Common bandwidth `((C+3 + C-3) / (6 (C+2 - C-2)^2))^(1/7) n^(-1/7)`.
pub fn equal_adj_mse_from_constants(
    c2_plus: f64,
    c2_minus: f64,
    c3_plus: f64,
    c3_minus: f64,
    n: f64,
) -> f64 {
    adj_mse_from_constants(c2_plus - c2_minus, c3_plus + c3_minus, n)
}

/// Pilot quantities for one side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidePilot {
    pub side: Side,
    pub n: usize,
    pub h_rot: f64,
    pub m2: f64,
    pub m3: f64,
    pub sigma2_global: f64,
    pub sigma: f64,
    pub fx: f64,
    pub fx_deriv: f64,
    pub c2: f64,
    /// Adjusted-variance constant relative to the side's sample size.
    pub c3: f64,
}

/// Local-linear boundary kernel density estimate at `x0`, relative to the side's size.
fn boundary_density(x: &[f64], side: Side, x0: f64, h: f64, kernel: &KernelSpec) -> f64 {
    let n = x.len() as f64;
    let b = kernel.effective_bound();
    let (lo, hi) = match side {
        Side::Above => ((-x0 / h).max(-b), b),
        Side::Below => (-b, (-x0 / h).min(b)),
    };
    let m = |j: i32| integrate(|u| u.powi(j) * kernel.eval(u), lo, hi, 1e-12);
    let (m0, m1, m2) = (m(0), m(1), m(2));
    let det = m0 * m2 - m1 * m1;
    let s: f64 = x
        .iter()
        .map(|&v| {
            let u = (v - x0) / h;
            kernel.eval(u) * (m2 - m1 * u)
        })
        .sum();
    s / (n * h * det)
}

/// Finite difference of the boundary density between the cutoff and `h/2` inside the side.
pub fn density_slope(x: &[f64], side: Side, h: f64, kernel: &KernelSpec) -> f64 {
    let step = 0.5 * h * side.sign();
    let f0 = boundary_density(x, side, 0.0, h, kernel);
    let f1 = boundary_density(x, side, step, h, kernel);
    (f1 - f0) / step
}

/// Rule-of-thumb bandwidth on one side; `x` centered at the cutoff.
pub fn select_rule_of_thumb(
    x: &[f64],
    y: &[f64],
    side: Side,
    q: usize,
    kernel: &KernelSpec,
) -> Result<(f64, QuarticFit)> {
    let quartic = fit_quartic(x, y, side)?;
    let raw = rot_from_constants(
        rot_kernel_constant(kernel),
        quartic.sigma2,
        quartic.range,
        quartic.curvature_ss,
    );
    Ok((clamp_bandwidth(raw, quartic.range, x.len(), q), quartic))
}

/// Pilot quantities and the adjusted-MSE constants on one side.
pub fn side_pilot(
    x: &[f64],
    y: &[f64],
    side: Side,
    q: usize,
    kernel: &KernelSpec,
) -> Result<SidePilot> {
    let (h_rot, quartic) = select_rule_of_thumb(x, y, side, q, kernel)?;
    let nuis = estimate_nuisances(x, y, side, h_rot, kernel, q, true)?;
    let grid = nuis.grid.as_ref().ok_or(RdError::DegenerateResiduals)?;
    let moments = one_sided_moments(kernel, side, 7)?;
    let k = constants(&moments, grid)?;
    let m2 = quartic.second_derivative_at_cutoff();
    let m3 = quartic.third_derivative_at_cutoff();
    let fx = nuis.fx_at_cutoff;
    let fx_deriv = density_slope(x, side, h_rot, kernel);
    let c2 = k.a_check * m3 / 6.0 + 0.5 * k.a_tilde * fx_deriv / fx * m2;
    let sigma2 = nuis.sigma_at_cutoff.powi(2);
    let qf = q as f64;
    let b_star = k.b_star.unwrap_or(0.0);
    let cross = k.cross.unwrap_or(0.0);
    let c3 = sigma2 / fx * (k.b_y + k.a * k.a * b_star - 2.0 * k.a * cross / qf);
    Ok(SidePilot {
        side,
        n: x.len(),
        h_rot,
        m2,
        m3,
        sigma2_global: quartic.sigma2,
        sigma: nuis.sigma_at_cutoff,
        fx,
        fx_deriv,
        c2,
        c3,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthResult {
    pub h_plus: f64,
    pub h_minus: f64,
    pub method: BandwidthMethod,
    pub c2_plus: Option<f64>,
    pub c2_minus: Option<f64>,
    pub c3_plus: Option<f64>,
    pub c3_minus: Option<f64>,
    /// Set when the bias-of-bias constant vanished and the rule of thumb was used.
    pub degenerate_curvature: bool,
    pub pilot_plus: Option<SidePilot>,
    pub pilot_minus: Option<SidePilot>,
}

impl BandwidthResult {
    pub fn fixed(h_plus: f64, h_minus: f64) -> Self {
        BandwidthResult {
            h_plus,
            h_minus,
            method: BandwidthMethod::Fixed,
            c2_plus: None,
            c2_minus: None,
            c3_plus: None,
            c3_minus: None,
            degenerate_curvature: false,
            pilot_plus: None,
            pilot_minus: None,
        }
    }
}

fn curvature_vanishes(c2: f64) -> bool {
    !(c2.abs() > 1e-12) || !c2.is_finite()
}

fn check_c3(c3: f64) -> Result<()> {
    if c3 > 0.0 && c3.is_finite() {
        Ok(())
    } else {
        Err(RdError::NegativeAdjustedVariance(c3))
    }
}

/// Bandwidths for both sides of a sample.
pub fn select_bandwidths(
    sample: &RdSample,
    q: usize,
    kernel: &KernelSpec,
    method: BandwidthMethod,
) -> Result<BandwidthResult> {
    let above = sample.side(Side::Above);
    let below = sample.side(Side::Below);
    let pp = side_pilot(&above.x, &above.y, Side::Above, q, kernel)?;
    let pm = side_pilot(&below.x, &below.y, Side::Below, q, kernel)?;
    let range_p = side_range(&above.x);
    let range_m = side_range(&below.x);
    let mut out = BandwidthResult {
        h_plus: pp.h_rot,
        h_minus: pm.h_rot,
        method: BandwidthMethod::Rot,
        c2_plus: Some(pp.c2),
        c2_minus: Some(pm.c2),
        c3_plus: Some(pp.c3),
        c3_minus: Some(pm.c3),
        degenerate_curvature: false,
        pilot_plus: None,
        pilot_minus: None,
    };
    match method {
        BandwidthMethod::Rot | BandwidthMethod::Fixed => {}
        BandwidthMethod::AdjMseTwo => {
            check_c3(pp.c3)?;
            check_c3(pm.c3)?;
            out.method = BandwidthMethod::AdjMseTwo;
            if curvature_vanishes(pp.c2) {
                out.degenerate_curvature = true;
            } else {
                let h = adj_mse_from_constants(pp.c2, pp.c3, pp.n as f64);
                out.h_plus = clamp_bandwidth(h, range_p, pp.n, q);
            }
            if curvature_vanishes(pm.c2) {
                out.degenerate_curvature = true;
            } else {
                let h = adj_mse_from_constants(pm.c2, pm.c3, pm.n as f64);
                out.h_minus = clamp_bandwidth(h, range_m, pm.n, q);
            }
        }
        BandwidthMethod::AdjMseEqual => {
            check_c3(pp.c3)?;
            check_c3(pm.c3)?;
            let n = (pp.n + pm.n) as f64;
            let c3p = pp.c3 * n / pp.n as f64;
            let c3m = pm.c3 * n / pm.n as f64;
            out.method = BandwidthMethod::AdjMseEqual;
            if curvature_vanishes(pp.c2 - pm.c2) {
                out.degenerate_curvature = true;
            } else {
                let h = equal_adj_mse_from_constants(pp.c2, pm.c2, c3p, c3m, n);
                let floor = clamp_bandwidth(0.0, range_p, pp.n, q)
                    .max(clamp_bandwidth(0.0, range_m, pm.n, q));
                let common = h.max(floor).min(range_p.min(range_m));
                out.h_plus = common;
                out.h_minus = common;
            }
            out.c3_plus = Some(c3p);
            out.c3_minus = Some(c3m);
        }
    }
    out.pilot_plus = Some(pp);
    out.pilot_minus = Some(pm);
    Ok(out)
}

fn side_range(x: &[f64]) -> f64 {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    hi - lo
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_bandwidth_arithmetic() {
        let h = equal_adj_mse_from_constants(1.0, 0.0, 1.0, 1.0, 128.0);
        let expected = (1.0f64 / 3.0).powf(1.0 / 7.0) / 2.0;
        assert!((h - expected).abs() < 1e-12);
    }

    #[test]
    fn frozen_constants_sample_size_law() {
        let h1 = adj_mse_from_constants(0.7, 2.0, 1000.0);
        let h2 = adj_mse_from_constants(0.7, 2.0, 2000.0);
        assert!((h2 / h1 - 2f64.powf(-1.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_constants() {
        let base = adj_mse_from_constants(1.0, 1.0, 500.0);
        assert!(adj_mse_from_constants(1.0, 2.0, 500.0) > base);
        assert!(adj_mse_from_constants(2.0, 1.0, 500.0) < base);
        assert!(adj_mse_from_constants(-2.0, 1.0, 500.0) < base);
    }

    #[test]
    fn triangular_rot_constant() {
        let c = rot_kernel_constant(&KernelSpec::triangular());
        assert!((c - 24f64.powf(0.2)).abs() < 1e-12);
    }

    #[test]
    fn rot_noise_scaling() {
        let a = rot_from_constants(1.9, 0.25, 1.0, 40.0);
        let b = rot_from_constants(1.9, 0.5, 1.0, 40.0);
        assert!((b / a - 2f64.powf(0.2)).abs() < 1e-12);
    }

    #[test]
    fn noiseless_quadratic_hits_floor() {
        let x: Vec<f64> = (0..200).map(|i| i as f64 / 200.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 + v + 3.0 * v * v).collect();
        let (h, _) =
            select_rule_of_thumb(&x, &y, Side::Above, 7, &KernelSpec::triangular()).unwrap();
        let floor = (199.0 / 200.0) / 200.0 * 10.0;
        assert!(h > 0.0 && (h - floor).abs() < 1e-12, "{h} vs {floor}");
    }

    #[test]
    fn uniform_density_has_flat_slope() {
        let n = 40000;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let s = density_slope(&x, Side::Above, 0.2, &KernelSpec::triangular());
        assert!(s.abs() < 0.01, "{s}");
        let xb: Vec<f64> = x.iter().map(|v| -v).collect();
        let s = density_slope(&xb, Side::Below, 0.2, &KernelSpec::triangular());
        assert!(s.abs() < 0.01, "{s}");
    }

    #[test]
    fn linear_density_slope() {
        // density 2(1 - x) on [0, 1]: inverse-CDF grid
        let n = 40000;
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) / n as f64;
                1.0 - (1.0 - u).sqrt()
            })
            .collect();
        let s = density_slope(&x, Side::Above, 0.1, &KernelSpec::triangular());
        assert!((s + 2.0).abs() < 0.1, "{s}");
    }
}
