//! The `S`, `Sigma` and cross `Sigma_YT` matrices, asymptotic and fixed-n,
//! and the scalar constants derived from them.
//!
//! Parameters are ordered as `q` intercepts followed by `p` slopes, so the
//! `11` block is `q x q` and the `22` block is `p x p`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};
use crate::kernels::{KernelMoments, KernelSpec};
use crate::linalg::inverse_guarded;
use crate::nuisance::QuantileGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SandwichMode {
    Asymptotic,
    FixedN,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichSet {
    pub mode: SandwichMode,
    pub q: usize,
    pub p: usize,
    pub s: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub s_inv: DMatrix<f64>,
}

impl SandwichSet {
    /// `S^-1 Sigma S^-1`.
    pub fn sandwich(&self) -> DMatrix<f64> {
        &self.s_inv * &self.sigma * &self.s_inv
    }
}

/// `S` from densities at the quantiles and first-moment sums `m[0..=2p]`.
pub fn s_matrix(f: &[f64], m: &[f64], p: usize) -> DMatrix<f64> {
    let q = f.len();
    let ftot: f64 = f.iter().sum();
    let d = q + p;
    let mut s = DMatrix::zeros(d, d);
    for k in 0..q {
        s[(k, k)] = f[k] * m[0];
        for j in 1..=p {
            s[(k, q + j - 1)] = f[k] * m[j];
            s[(q + j - 1, k)] = f[k] * m[j];
        }
    }
    for j in 1..=p {
        for l in 1..=p {
            s[(q + j - 1, q + l - 1)] = ftot * m[j + l];
        }
    }
    s
}

/// `Sigma` from a pairwise matrix (`tau_kk'` or `phi_kk'`) and second-moment sums.
pub fn sigma_matrix(pair: &DMatrix<f64>, v: &[f64], p: usize) -> DMatrix<f64> {
    let q = pair.nrows();
    let d = q + p;
    let row_sums: Vec<f64> = (0..q).map(|k| pair.row(k).sum()).collect();
    let total: f64 = pair.sum();
    let mut s = DMatrix::zeros(d, d);
    for k in 0..q {
        for l in 0..q {
            s[(k, l)] = v[0] * pair[(k, l)];
        }
        for j in 1..=p {
            s[(k, q + j - 1)] = row_sums[k] * v[j];
            s[(q + j - 1, k)] = row_sums[k] * v[j];
        }
    }
    for j in 1..=p {
        for l in 1..=p {
            s[(q + j - 1, q + l - 1)] = total * v[j + l];
        }
    }
    s
}

fn check_p(p: usize) -> Result<()> {
    if (1..=3).contains(&p) {
        Ok(())
    } else {
        Err(RdError::InvalidInput(format!(
            "polynomial order must be 1..=3, got {p}"
        )))
    }
}

/// Asymptotic matrices from kernel moments and the quantile grid.
pub fn build_asymptotic(
    moments: &KernelMoments,
    grid: &QuantileGrid,
    p: usize,
) -> Result<SandwichSet> {
    check_p(p)?;
    if grid.f_at_c.iter().any(|&f| !(f > 0.0)) {
        return Err(RdError::InvalidInput(
            "densities at the quantiles must be positive".into(),
        ));
    }
    let s = s_matrix(&grid.f_at_c, &moments.mu, p);
    let sigma = sigma_matrix(&grid.tau_pair, &moments.nu, p);
    let s_inv = inverse_guarded(&s)?;
    Ok(SandwichSet {
        mode: SandwichMode::Asymptotic,
        q: grid.q,
        p,
        s,
        sigma,
        s_inv,
    })
}

/// Asymptotic cross matrix `Sigma_YT` built from `phi_kk'`.
pub fn sigma_yt_asymptotic(moments: &KernelMoments, phi: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    sigma_matrix(phi, &moments.nu, p)
}

/// Empirical kernel sums `(1/(n h)) sum K_i x_i^j` and `(1/(n h)) sum K_i^2 x_i^j`
/// with `x_i = X_i / h`, `j = 0..=order`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn empirical_moments(x: &[f64], h: f64, kernel: &KernelSpec, order: usize) -> EmpiricalMoments {
    let n = x.len() as f64;
    let mut m = vec![0.0; order + 1];
    let mut v = vec![0.0; order + 1];
    for &xi in x {
        let u = xi / h;
        let k = kernel.eval(u);
        if k == 0.0 {
            continue;
        }
        let mut pw = 1.0;
        for j in 0..=order {
            m[j] += k * pw;
            v[j] += k * k * pw;
            pw *= u;
        }
    }
    let c = 1.0 / (n * h);
    m.iter_mut().for_each(|a| *a *= c);
    v.iter_mut().for_each(|a| *a *= c);
    EmpiricalMoments { m, v }
}

/// Cross second-moment sums `(1/(n sqrt(h_Y h_T))) sum K_Y,i K_T,i x_i^j`, `x_i = X_i / h_Y`.
pub fn empirical_cross_moments(
    x: &[f64],
    hy: f64,
    ht: f64,
    kernel: &KernelSpec,
    order: usize,
) -> Vec<f64> {
    let n = x.len() as f64;
    let mut v = vec![0.0; order + 1];
    for &xi in x {
        let k = kernel.eval(xi / hy) * kernel.eval(xi / ht);
        if k == 0.0 {
            continue;
        }
        let u = xi / hy;
        let mut pw = 1.0;
        for vj in v.iter_mut() {
            *vj += k * pw;
            pw *= u;
        }
    }
    let c = 1.0 / (n * (hy * ht).sqrt());
    v.iter_mut().for_each(|a| *a *= c);
    v
}

/// Fixed-n matrices with unit per-point scale `sigma_i = 1`; the caller
/// multiplies variances by the squared error scale.
pub fn build_fixed_n(
    x: &[f64],
    grid: &QuantileGrid,
    h: f64,
    kernel: &KernelSpec,
    p: usize,
) -> Result<SandwichSet> {
    check_p(p)?;
    let n_eff = x.iter().filter(|&&xi| kernel.eval(xi / h) > 0.0).count();
    if n_eff < grid.q + p + 1 {
        return Err(RdError::InsufficientData {
            side: "fixed-n".into(),
            have: n_eff,
            need: grid.q + p + 1,
        });
    }
    let em = empirical_moments(x, h, kernel, 2 * p);
    let s = s_matrix(&grid.f_at_c, &em.m, p);
    let sigma = sigma_matrix(&grid.tau_pair, &em.v, p);
    let s_inv = inverse_guarded(&s)?;
    Ok(SandwichSet {
        mode: SandwichMode::FixedN,
        q: grid.q,
        p,
        s,
        sigma,
        s_inv,
    })
}

/// `e_q' (M)_{11} e_q`: sum of the intercept block.
pub fn block11_sum(m: &DMatrix<f64>, q: usize) -> f64 {
    m.view((0, 0), (q, q)).sum()
}

/// `e_q' (M)_{12,2}`: sum over intercept rows of the second-slope column.
pub fn block12_second_sum(m: &DMatrix<f64>, q: usize) -> f64 {
    (0..q).map(|k| m[(k, q + 1)]).sum()
}

/// `e_2' (M)_{22} e_2`.
pub fn block22_second(m: &DMatrix<f64>, q: usize) -> f64 {
    m[(q + 1, q + 1)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarConstants {
    pub a: f64,
    pub a_check: f64,
    pub a_tilde: f64,
    pub a_star: Option<f64>,
    pub b: f64,
    pub b_y: f64,
    pub b_star: Option<f64>,
    /// `e_q' (S^-1 Sigma S^-1)_{12,2}` from the order-2 matrices.
    pub cross: Option<f64>,
    pub b_yt: Option<f64>,
}

/// `b_Y = e_q' (S^-1 Sigma S^-1)_{11} e_q / q^2` from order-1 matrices.
pub fn b_y(set1: &SandwichSet) -> f64 {
    let q = set1.q as f64;
    block11_sum(&set1.sandwich(), set1.q) / (q * q)
}

/// `b_YT = e_q' (S_Y^-1 Sigma_YT S_T^-1)_{11} e_q / q^2` from order-1 matrices.
pub fn b_yt(set_y1: &SandwichSet, set_t1: &SandwichSet, sigma_yt1: &DMatrix<f64>) -> f64 {
    let q = set_y1.q as f64;
    let m = &set_y1.s_inv * sigma_yt1 * &set_t1.s_inv;
    block11_sum(&m, set_y1.q) / (q * q)
}

/// `a*` from order-3 matrices.
pub fn a_star(set3: &SandwichSet, moments: &KernelMoments, grid: &QuantileGrid) -> f64 {
    let q = grid.q;
    let ftot = grid.total_density();
    let row = q + 1;
    let first: f64 = (0..q)
        .map(|k| set3.s_inv[(row, k)] * grid.f_at_c[k])
        .sum::<f64>()
        * moments.mu[4];
    let second: f64 = (0..3)
        .map(|j| set3.s_inv[(row, q + j)] * moments.mu[5 + j])
        .sum::<f64>()
        * ftot;
    first + second
}

/// All scalar constants for one side at the asymptotic limit.
pub fn constants(moments: &KernelMoments, grid: &QuantileGrid) -> Result<ScalarConstants> {
    let set1 = build_asymptotic(moments, grid, 1)?;
    let set2 = build_asymptotic(moments, grid, 2)?;
    let v2 = set2.sandwich();
    let a_star = if moments.mu.len() > 7 {
        build_asymptotic(moments, grid, 3)
            .ok()
            .map(|s3| a_star(&s3, moments, grid))
    } else {
        None
    };
    Ok(ScalarConstants {
        a: moments.a(),
        a_check: moments.a_check(),
        a_tilde: moments.a_tilde(),
        a_star,
        b: moments.b(),
        b_y: b_y(&set1),
        b_star: Some(block22_second(&v2, grid.q)),
        cross: Some(block12_second_sum(&v2, grid.q)),
        b_yt: None,
    })
}
