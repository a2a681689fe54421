//! Nuisance quantities consumed by the variance and bias formulas:
//! error quantiles and densities, the conditional scale at the cutoff,
//! the boundary design density and the pairwise constants.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};
use crate::kernels::{one_sided_moments, KernelSpec, Side};
use crate::lcqr::{quantile_levels, window};
use crate::linalg::weighted_least_squares;
use crate::util::{mean, quantile_sorted, sd, sorted_copy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileGrid {
    pub q: usize,
    pub tau: Vec<f64>,
    pub c: Vec<f64>,
    pub f_at_c: Vec<f64>,
    #[serde(skip)]
    pub tau_pair: DMatrix<f64>,
    #[serde(skip)]
    pub phi_pair: Option<DMatrix<f64>>,
}

/// `tau_kk' = min(tau_k, tau_k') - tau_k tau_k'`.
pub fn tau_pair(tau: &[f64]) -> DMatrix<f64> {
    let q = tau.len();
    DMatrix::from_fn(q, q, |a, b| tau[a].min(tau[b]) - tau[a] * tau[b])
}

impl QuantileGrid {
    /// Grid from exact quantiles and densities.
    pub fn from_parts(c: Vec<f64>, f_at_c: Vec<f64>) -> Self {
        let q = c.len();
        let tau = quantile_levels(q);
        let tp = tau_pair(&tau);
        QuantileGrid {
            q,
            tau,
            c,
            f_at_c,
            tau_pair: tp,
            phi_pair: None,
        }
    }

    pub fn total_density(&self) -> f64 {
        self.f_at_c.iter().sum()
    }
}

/// Silverman's rule-of-thumb bandwidth for a Gaussian kernel density estimate.
pub fn silverman_bandwidth(data: &[f64]) -> f64 {
    let n = data.len() as f64;
    let s = sd(data).unwrap_or(0.0);
    let sorted = sorted_copy(data);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { s.min(iqr / 1.34) } else { s };
    0.9 * spread * n.powf(-0.2)
}

/// Gaussian kernel density estimate at `at`.
pub fn kde(data: &[f64], bw: f64, at: f64) -> f64 {
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * bw * data.len() as f64);
    data.iter()
        .map(|&e| {
            let z = (at - e) / bw;
            (-0.5 * z * z).exp()
        })
        .sum::<f64>()
        * norm
}

/// Quantile grid estimated from standardized residuals.
///
/// With `symmetrize`, quantiles are made antisymmetric and densities are
/// averaged at `±c_k`.
pub fn estimate_grid(residuals: &[f64], q: usize, symmetrize: bool) -> Result<QuantileGrid> {
    if residuals.len() < 2 {
        return Err(RdError::InsufficientData {
            side: "residuals".into(),
            have: residuals.len(),
            need: 2,
        });
    }
    let spread = sd(residuals).unwrap_or(0.0);
    if !(spread > 0.0) {
        return Err(RdError::DegenerateResiduals);
    }
    let tau = quantile_levels(q);
    let sorted = sorted_copy(residuals);
    let raw: Vec<f64> = tau.iter().map(|&t| quantile_sorted(&sorted, t)).collect();
    let c: Vec<f64> = if symmetrize {
        (0..q).map(|k| 0.5 * (raw[k] - raw[q - 1 - k])).collect()
    } else {
        raw
    };
    let bw = silverman_bandwidth(residuals);
    let bw = if bw > 0.0 { bw } else { 0.1 * spread };
    grid_at(residuals, tau, c, bw, symmetrize)
}

/// Grid for residuals of a binary outcome: raw quantiles and a smoothing
/// bandwidth from the standard deviation alone.
pub fn estimate_grid_discrete(residuals: &[f64], q: usize) -> Result<QuantileGrid> {
    if residuals.len() < 2 {
        return Err(RdError::InsufficientData {
            side: "residuals".into(),
            have: residuals.len(),
            need: 2,
        });
    }
    let spread = sd(residuals).unwrap_or(0.0);
    if !(spread > 0.0) {
        return Err(RdError::DegenerateResiduals);
    }
    let tau = quantile_levels(q);
    let sorted = sorted_copy(residuals);
    let c: Vec<f64> = tau.iter().map(|&t| quantile_sorted(&sorted, t)).collect();
    let bw = 0.9 * spread * (residuals.len() as f64).powf(-0.2);
    grid_at(residuals, tau, c, bw, false)
}

fn grid_at(
    residuals: &[f64],
    tau: Vec<f64>,
    c: Vec<f64>,
    bw: f64,
    symmetrize: bool,
) -> Result<QuantileGrid> {
    let f_at_c: Vec<f64> = c
        .iter()
        .map(|&ck| {
            if symmetrize {
                0.5 * (kde(residuals, bw, ck) + kde(residuals, bw, -ck))
            } else {
                kde(residuals, bw, ck)
            }
        })
        .collect();
    if f_at_c.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
        return Err(RdError::DegenerateResiduals);
    }
    let mut g = QuantileGrid::from_parts(c, f_at_c);
    g.tau = tau;
    Ok(g)
}

/// `phi_kk' = F(c_k^Y, c_k'^T) - tau_k tau_k'` from paired standardized residuals.
pub fn estimate_phi(
    ey: &[f64],
    et: &[f64],
    grid_y: &QuantileGrid,
    grid_t: &QuantileGrid,
) -> DMatrix<f64> {
    let q = grid_y.q;
    let n = ey.len().min(et.len()) as f64;
    DMatrix::from_fn(q, q, |a, b| {
        let cy = grid_y.c[a];
        let ct = grid_t.c[b];
        let cnt = ey
            .iter()
            .zip(et)
            .filter(|(&u, &v)| u <= cy && v <= ct)
            .count() as f64;
        cnt / n - grid_y.tau[a] * grid_t.tau[b]
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceEstimates {
    pub side: Side,
    /// Conditional error scale at the cutoff.
    pub sigma_at_cutoff: f64,
    /// Boundary density of the running variable, relative to the side's sample size.
    pub fx_at_cutoff: f64,
    pub pilot_bandwidth: f64,
    /// Standardized pilot residuals, in window order.
    #[serde(skip)]
    pub residuals: Vec<f64>,
    pub grid: Option<QuantileGrid>,
}

/// Local linear pilot fit, residual scale and boundary design density.
///
/// `x` is centered at the cutoff and holds one side's points.
pub fn estimate_sigma_fx(
    x: &[f64],
    y: &[f64],
    side: Side,
    pilot_bandwidth: f64,
    kernel: &KernelSpec,
) -> Result<NuisanceEstimates> {
    let (idx, u, w) = window(x, 0.0, pilot_bandwidth, kernel);
    if idx.len() < 3 {
        return Err(RdError::InsufficientData {
            side: side.name().into(),
            have: idx.len(),
            need: 3,
        });
    }
    let design = DMatrix::from_fn(idx.len(), 2, |r, c| if c == 0 { 1.0 } else { u[r] });
    let yy: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let beta = weighted_least_squares(&design, &yy, &w).ok_or(RdError::SingularDesign)?;
    let e: Vec<f64> = (0..idx.len())
        .map(|r| yy[r] - beta[0] - beta[1] * u[r])
        .collect();
    let sw: f64 = w.iter().sum();
    let sigma = (e.iter().zip(&w).map(|(a, b)| b * a * a).sum::<f64>() / sw).sqrt();
    let ymag = yy.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sigma = if sigma <= 1e-12 * ymag { 0.0 } else { sigma };
    let mu0 = one_sided_moments(kernel, side, 4)?.mu[0];
    let fx = sw / (x.len() as f64 * pilot_bandwidth * mu0);
    let residuals = if sigma > 0.0 {
        e.iter().map(|v| v / sigma).collect()
    } else {
        vec![0.0; e.len()]
    };
    Ok(NuisanceEstimates {
        side,
        sigma_at_cutoff: sigma,
        fx_at_cutoff: fx,
        pilot_bandwidth,
        residuals,
        grid: None,
    })
}

/// Pilot estimates plus the quantile grid; errors when the residuals have no spread.
pub fn estimate_nuisances(
    x: &[f64],
    y: &[f64],
    side: Side,
    pilot_bandwidth: f64,
    kernel: &KernelSpec,
    q: usize,
    symmetrize: bool,
) -> Result<NuisanceEstimates> {
    let mut est = estimate_sigma_fx(x, y, side, pilot_bandwidth, kernel)?;
    if !(est.sigma_at_cutoff > 0.0) {
        return Err(RdError::DegenerateResiduals);
    }
    est.grid = Some(estimate_grid(&est.residuals, q, symmetrize)?);
    Ok(est)
}

/// Sample mean of the residuals, exposed for diagnostics.
pub fn residual_mean(est: &NuisanceEstimates) -> f64 {
    if est.residuals.is_empty() {
        0.0
    } else {
        mean(&est.residuals)
    }
}
