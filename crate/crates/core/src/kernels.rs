//! Kernel functions and their one-sided moments at a boundary point.
//!
//! For a kernel `K` with support bound `B`, the above-side moments are
//! `mu[j] = ∫_0^B u^j K(u) du` and `nu[j] = ∫_0^B u^j K(u)^2 du`; the
//! below side integrates over `[-B, 0]`. Polynomial kernels use closed
//! forms, the Gaussian kernel uses adaptive quadrature over `[0, 8]`.

use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};
use crate::quadrature::integrate;

/// Largest moment order served by [`one_sided_moments`].
pub const MAX_ORDER: usize = 16;

/// Effective support used for the Gaussian kernel.
pub const GAUSSIAN_BOUND: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Triangular,
    Epanechnikov,
    Uniform,
    Gaussian,
}

impl std::str::FromStr for KernelFamily {
    type Err = RdError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "triangular" => Ok(KernelFamily::Triangular),
            "epanechnikov" => Ok(KernelFamily::Epanechnikov),
            "uniform" => Ok(KernelFamily::Uniform),
            "gaussian" => Ok(KernelFamily::Gaussian),
            other => Err(RdError::InvalidInput(format!("unknown kernel `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Support bound `c` with `supp(K) = [-c, c]`; infinite for the Gaussian.
    pub support_bound: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily) -> Self {
        let support_bound = match family {
            KernelFamily::Gaussian => f64::INFINITY,
            _ => 1.0,
        };
        KernelSpec {
            family,
            support_bound,
        }
    }

    pub fn triangular() -> Self {
        Self::new(KernelFamily::Triangular)
    }

    /// Integration bound actually used for moments.
    pub fn effective_bound(&self) -> f64 {
        self.support_bound.min(GAUSSIAN_BOUND)
    }

    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        eval_kernel(self, u)
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::triangular()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Above,
    Below,
}

impl Side {
    pub fn sign(self) -> f64 {
        match self {
            Side::Above => 1.0,
            Side::Below => -1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::Above => "above",
            Side::Below => "below",
        }
    }
}

#[inline]
pub fn eval_kernel(spec: &KernelSpec, u: f64) -> f64 {
    let a = u.abs();
    match spec.family {
        KernelFamily::Triangular => {
            if a <= 1.0 {
                1.0 - a
            } else {
                0.0
            }
        }
        KernelFamily::Epanechnikov => {
            if a <= 1.0 {
                0.75 * (1.0 - a * a)
            } else {
                0.0
            }
        }
        KernelFamily::Uniform => {
            if a <= 1.0 {
                0.5
            } else {
                0.0
            }
        }
        KernelFamily::Gaussian => (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMoments {
    pub side: Side,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
}

impl KernelMoments {
    /// The bias constant `a = (mu2^2 - mu1 mu3) / (mu0 mu2 - mu1^2)`.
    pub fn a(&self) -> f64 {
        let m = &self.mu;
        (m[2] * m[2] - m[1] * m[3]) / self.det()
    }

    /// Third-order bias constant `(mu2 mu3 - mu1 mu4) / (mu0 mu2 - mu1^2)`.
    pub fn a_check(&self) -> f64 {
        let m = &self.mu;
        (m[2] * m[3] - m[1] * m[4]) / self.det()
    }

    /// Density-slope bias constant `(mu2^2 - mu1 mu4) / (mu0 mu2 - mu1^2)`.
    pub fn a_tilde(&self) -> f64 {
        let m = &self.mu;
        (m[2] * m[2] - m[1] * m[4]) / self.det()
    }

    /// Local linear variance constant.
    pub fn b(&self) -> f64 {
        let m = &self.mu;
        let v = &self.nu;
        let d = self.det();
        (m[2] * m[2] * v[0] - 2.0 * m[1] * m[2] * v[1] + m[1] * m[1] * v[2]) / (d * d)
    }

    fn det(&self) -> f64 {
        self.mu[0] * self.mu[2] - self.mu[1] * self.mu[1]
    }
}

fn closed_form(family: KernelFamily, j: usize) -> Option<(f64, f64)> {
    let j = j as f64;
    match family {
        KernelFamily::Triangular => Some((
            1.0 / ((j + 1.0) * (j + 2.0)),
            2.0 / ((j + 1.0) * (j + 2.0) * (j + 3.0)),
        )),
        KernelFamily::Epanechnikov => Some((
            0.75 * (1.0 / (j + 1.0) - 1.0 / (j + 3.0)),
            0.5625 * (1.0 / (j + 1.0) - 2.0 / (j + 3.0) + 1.0 / (j + 5.0)),
        )),
        KernelFamily::Uniform => Some((0.5 / (j + 1.0), 0.25 / (j + 1.0))),
        KernelFamily::Gaussian => None,
    }
}

/// Above-side moments by adaptive quadrature, whatever the family.
pub fn quadrature_moment(spec: &KernelSpec, j: usize) -> (f64, f64) {
    let bound = spec.effective_bound();
    let mu = integrate(
        |u| u.powi(j as i32) * eval_kernel(spec, u),
        0.0,
        bound,
        1e-14,
    );
    let nu = integrate(
        |u| {
            let k = eval_kernel(spec, u);
            u.powi(j as i32) * k * k
        },
        0.0,
        bound,
        1e-14,
    );
    (mu, nu)
}

/// One-sided moments `mu[0..=max_order]`, `nu[0..=max_order]`.
pub fn one_sided_moments(spec: &KernelSpec, side: Side, max_order: usize) -> Result<KernelMoments> {
    if max_order > MAX_ORDER {
        return Err(RdError::UnsupportedOrder(max_order, MAX_ORDER));
    }
    let order = max_order.max(4);
    let mut mu = Vec::with_capacity(order + 1);
    let mut nu = Vec::with_capacity(order + 1);
    for j in 0..=order {
        let (m, v) = closed_form(spec.family, j).unwrap_or_else(|| quadrature_moment(spec, j));
        let s = if side == Side::Below && j % 2 == 1 {
            -1.0
        } else {
            1.0
        };
        mu.push(s * m);
        nu.push(s * v);
    }
    Ok(KernelMoments { side, mu, nu })
}

/// Full-line constants `(R(K), mu2(K))` used by the rule-of-thumb bandwidth.
pub fn roughness_and_second_moment(spec: &KernelSpec) -> (f64, f64) {
    let (m2, _) = closed_form(spec.family, 2).unwrap_or_else(|| quadrature_moment(spec, 2));
    let (_, v0) = closed_form(spec.family, 0).unwrap_or_else(|| quadrature_moment(spec, 0));
    (2.0 * v0, 2.0 * m2)
}

/// Mass of the kernel over `[lo, hi]`.
pub fn kernel_mass(spec: &KernelSpec, lo: f64, hi: f64) -> f64 {
    let b = spec.effective_bound();
    let lo = lo.max(-b);
    let hi = hi.min(b);
    if hi <= lo {
        return 0.0;
    }
    match spec.family {
        KernelFamily::Triangular => {
            let cdf = |u: f64| {
                if u <= 0.0 {
                    0.5 * (1.0 + u) * (1.0 + u)
                } else {
                    1.0 - 0.5 * (1.0 - u) * (1.0 - u)
                }
            };
            cdf(hi) - cdf(lo)
        }
        KernelFamily::Epanechnikov => {
            let cdf = |u: f64| 0.5 + 0.75 * (u - u * u * u / 3.0);
            cdf(hi) - cdf(lo)
        }
        KernelFamily::Uniform => 0.5 * (hi - lo),
        KernelFamily::Gaussian => integrate(|u| eval_kernel(spec, u), lo, hi, 1e-13),
    }
}
