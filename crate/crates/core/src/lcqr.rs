//! Local composite quantile regression.
//!
//! The composite check-loss objective
//! `sum_k sum_i w_i rho_{tau_k}(y_i - a_k - d_i' beta)` with per-quantile
//! intercepts and shared slopes is minimized in two stages: a perturbed
//! majorize-minimize iteration (each step a weighted least-squares solve
//! exploiting the diagonal intercept block), then an exact edge descent
//! over vertices of the piecewise-linear objective that ends with an
//! optimality certificate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};
use crate::kernels::KernelSpec;
use crate::linalg::{rank, weighted_least_squares};
use crate::sample::RdSample;
use crate::util::weighted_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Convergence tolerance on the max parameter change, relative to the scale of `y`.
    pub tol: f64,
    pub max_iter: usize,
    /// Perturbation `eps = eps_scale * scale(y)` of the smoothed check loss.
    pub eps_scale: f64,
    /// Run the exact vertex descent after the MM stage.
    pub polish: bool,
    pub max_pivots: usize,
    /// Try the vertex descent after this many MM steps; resume MM if it
    /// does not end with an optimality certificate.
    pub handoff_iter: Option<usize>,
    /// Keep the surrogate objective value at every MM iterate.
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            max_iter: 5000,
            eps_scale: 1e-4,
            polish: true,
            max_pivots: 400,
            handoff_iter: Some(50),
            record_trace: false,
        }
    }
}

/// Check loss `rho_tau(r) = tau r - r 1{r < 0}`.
#[inline]
pub fn check_loss(tau: f64, r: f64) -> f64 {
    if r < 0.0 {
        (tau - 1.0) * r
    } else {
        tau * r
    }
}

/// Quantile positions `tau_k = k / (q + 1)`.
pub fn quantile_levels(q: usize) -> Vec<f64> {
    (1..=q).map(|k| k as f64 / (q + 1) as f64).collect()
}

/// Solution of a composite quantile problem.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeSolution {
    pub intercepts: Vec<f64>,
    pub slopes: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub mm_converged: bool,
    pub certified: bool,
    pub pivots: usize,
    /// Surrogate objective along the MM iterates (empty unless requested).
    pub trace: Vec<f64>,
}

impl CompositeSolution {
    pub fn converged(&self) -> bool {
        self.mm_converged || self.certified
    }
}

/// Composite check-loss objective for a row-major design with `m` slope columns.
pub fn composite_objective(
    y: &[f64],
    w: &[f64],
    design: &[f64],
    m: usize,
    taus: &[f64],
    intercepts: &[f64],
    slopes: &[f64],
) -> f64 {
    let mut total = 0.0;
    for i in 0..y.len() {
        let fit: f64 = (0..m).map(|j| design[i * m + j] * slopes[j]).sum();
        let base = y[i] - fit;
        let mut s = 0.0;
        for (k, &tau) in taus.iter().enumerate() {
            s += check_loss(tau, base - intercepts[k]);
        }
        total += w[i] * s;
    }
    total
}

fn surrogate_objective(
    y: &[f64],
    w: &[f64],
    design: &[f64],
    m: usize,
    taus: &[f64],
    theta: &[f64],
    eps: f64,
) -> f64 {
    let q = taus.len();
    let mut total = 0.0;
    for i in 0..y.len() {
        let fit: f64 = (0..m).map(|j| design[i * m + j] * theta[q + j]).sum();
        let base = y[i] - fit;
        for (k, &tau) in taus.iter().enumerate() {
            let r = base - theta[k];
            total += w[i] * (check_loss(tau, r) - 0.5 * eps * (eps + r.abs()).ln());
        }
    }
    total
}

fn weighted_scale(y: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    let mean = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let var = y
        .iter()
        .zip(w)
        .map(|(a, b)| b * (a - mean) * (a - mean))
        .sum::<f64>()
        / sw;
    let s = var.sqrt();
    if s > 0.0 {
        s
    } else {
        1e-6 * mean.abs().max(1.0)
    }
}

/// Minimizes the composite check loss over `(a_1..a_q, beta)`.
///
/// `design` is row-major with `m` columns; weights must be positive.
pub fn solve_composite(
    y: &[f64],
    w: &[f64],
    design: &[f64],
    m: usize,
    taus: &[f64],
    opts: &SolverOptions,
) -> Result<CompositeSolution> {
    let n = y.len();
    let q = taus.len();
    let d = q + m;
    if n == 0 || q == 0 {
        return Err(RdError::InsufficientData {
            side: "fit".into(),
            have: n,
            need: d + 1,
        });
    }
    let scale = weighted_scale(y, w);
    let eps = opts.eps_scale * scale;

    // Initial values: WLS slopes and common intercept, quantile-shifted intercepts.
    let mut theta = vec![0.0; d];
    let xmat = DMatrix::from_fn(
        n,
        m + 1,
        |i, j| if j == 0 { 1.0 } else { design[i * m + j - 1] },
    );
    let init = weighted_least_squares(&xmat, y, w).unwrap_or_else(|| DVector::zeros(m + 1));
    let resid: Vec<f64> = (0..n)
        .map(|i| y[i] - init[0] - (0..m).map(|j| design[i * m + j] * init[j + 1]).sum::<f64>())
        .collect();
    for (k, &tau) in taus.iter().enumerate() {
        theta[k] = init[0] + weighted_quantile(&resid, w, tau);
    }
    for j in 0..m {
        theta[q + j] = init[j + 1];
    }

    let sw: f64 = w.iter().sum();
    let mut wd = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            wd[j] += w[i] * design[i * m + j];
        }
    }

    let mut trace = Vec::new();
    if opts.record_trace {
        trace.push(surrogate_objective(y, w, design, m, taus, &theta, eps));
    }
    let mut mm_converged = false;
    let mut iterations = 0;
    let mut certified = false;
    let mut pivots = 0;
    let mut best = theta.clone();
    let mut best_obj = f64::INFINITY;
    let mut ws = MmWork::new(n, q, m);
    let handoff = if opts.polish { opts.handoff_iter } else { None };
    if let Some(h) = handoff {
        let (used, conv) = mm_steps(
            y,
            w,
            design,
            m,
            taus,
            &mut theta,
            eps,
            scale,
            sw,
            &wd,
            h.min(opts.max_iter),
            opts,
            &mut trace,
            &mut ws,
        );
        iterations += used;
        mm_converged = conv;
        best_obj = composite_objective(y, w, design, m, taus, &theta[..q], &theta[q..]);
        best = theta.clone();
        if let Some(res) = vertex_descent(y, w, design, m, taus, &theta, scale, opts.max_pivots) {
            pivots += res.pivots;
            let obj = composite_objective(y, w, design, m, taus, &res.theta[..q], &res.theta[q..]);
            if obj <= best_obj {
                best_obj = obj;
                best = res.theta;
                certified = res.certified;
            }
        }
    }
    if !certified && !mm_converged {
        let budget = opts.max_iter - iterations;
        let (used, conv) = mm_steps(
            y, w, design, m, taus, &mut theta, eps, scale, sw, &wd, budget, opts, &mut trace,
            &mut ws,
        );
        iterations += used;
        mm_converged = conv;
        let obj = composite_objective(y, w, design, m, taus, &theta[..q], &theta[q..]);
        if obj <= best_obj {
            best_obj = obj;
            best = theta.clone();
        }
        if opts.polish {
            if let Some(res) = vertex_descent(y, w, design, m, taus, &theta, scale, opts.max_pivots)
            {
                pivots += res.pivots;
                let obj =
                    composite_objective(y, w, design, m, taus, &res.theta[..q], &res.theta[q..]);
                if obj <= best_obj {
                    best_obj = obj;
                    best = res.theta;
                    certified = res.certified;
                }
            }
        }
    }
    Ok(CompositeSolution {
        intercepts: best[..q].to_vec(),
        slopes: best[q..].to_vec(),
        objective: best_obj,
        iterations,
        mm_converged,
        certified,
        pivots,
        trace,
    })
}

struct MmWork {
    base: Vec<f64>,
    a11: Vec<f64>,
    a12: Vec<f64>,
    rhs1: Vec<f64>,
    a22: DMatrix<f64>,
    rhs2: DVector<f64>,
}

impl MmWork {
    fn new(n: usize, q: usize, m: usize) -> Self {
        MmWork {
            base: vec![0.0; n],
            a11: vec![0.0; q],
            a12: vec![0.0; q * m],
            rhs1: vec![0.0; q],
            a22: DMatrix::zeros(m, m),
            rhs2: DVector::zeros(m),
        }
    }
}

/// Runs at most `budget` MM steps; returns the steps used and whether the
/// parameter change fell below tolerance.
#[allow(clippy::too_many_arguments)]
fn mm_steps(
    y: &[f64],
    w: &[f64],
    design: &[f64],
    m: usize,
    taus: &[f64],
    theta: &mut [f64],
    eps: f64,
    scale: f64,
    sw: f64,
    wd: &[f64],
    budget: usize,
    opts: &SolverOptions,
    trace: &mut Vec<f64>,
    ws: &mut MmWork,
) -> (usize, bool) {
    let n = y.len();
    let q = taus.len();
    let MmWork {
        base,
        a11,
        a12,
        rhs1,
        a22,
        rhs2,
    } = ws;
    let mut iterations = 0;
    while iterations < budget {
        iterations += 1;
        for i in 0..n {
            base[i] = y[i]
                - (0..m)
                    .map(|j| design[i * m + j] * theta[q + j])
                    .sum::<f64>();
        }
        a11.iter_mut().for_each(|v| *v = 0.0);
        a12.iter_mut().for_each(|v| *v = 0.0);
        rhs1.iter_mut().for_each(|v| *v = 0.0);
        a22.fill(0.0);
        rhs2.fill(0.0);
        for i in 0..n {
            let row = &design[i * m..(i + 1) * m];
            let mut vsum = 0.0;
            for k in 0..q {
                let r = base[i] - theta[k];
                let v = w[i] / (eps + r.abs());
                a11[k] += v;
                rhs1[k] += v * y[i];
                for j in 0..m {
                    a12[k * m + j] += v * row[j];
                }
                vsum += v;
            }
            for j in 0..m {
                rhs2[j] += vsum * y[i] * row[j];
                for l in j..m {
                    a22[(j, l)] += vsum * row[j] * row[l];
                }
            }
        }
        for (k, &tau) in taus.iter().enumerate() {
            let c = 2.0 * (tau - 0.5);
            rhs1[k] += c * sw;
            for j in 0..m {
                rhs2[j] += c * wd[j];
            }
        }
        // Schur complement on the diagonal intercept block.
        let mut schur = a22.clone();
        let mut g = rhs2.clone();
        for k in 0..q {
            let inv = 1.0 / a11[k];
            for j in 0..m {
                g[j] -= a12[k * m + j] * rhs1[k] * inv;
                for l in j..m {
                    schur[(j, l)] -= a12[k * m + j] * a12[k * m + l] * inv;
                }
            }
        }
        for j in 0..m {
            for l in 0..j {
                schur[(j, l)] = schur[(l, j)];
            }
        }
        let beta = if m == 0 {
            DVector::zeros(0)
        } else {
            match schur.clone().cholesky() {
                Some(c) => c.solve(&g),
                None => match schur.lu().solve(&g) {
                    Some(b) => b,
                    None => break,
                },
            }
        };
        let mut change: f64 = 0.0;
        for k in 0..q {
            let dot: f64 = (0..m).map(|j| a12[k * m + j] * beta[j]).sum();
            let ak = (rhs1[k] - dot) / a11[k];
            change = change.max((ak - theta[k]).abs());
            theta[k] = ak;
        }
        for j in 0..m {
            change = change.max((beta[j] - theta[q + j]).abs());
            theta[q + j] = beta[j];
        }
        if opts.record_trace {
            trace.push(surrogate_objective(y, w, design, m, taus, theta, eps));
        }
        if !change.is_finite() {
            break;
        }
        if change < opts.tol * scale {
            return (iterations, true);
        }
    }
    (iterations, false)
}

struct DescentResult {
    theta: Vec<f64>,
    certified: bool,
    pivots: usize,
}

/// Edge descent over vertices of the piecewise-linear objective, started
/// from the vertex spanned by the smallest-residual independent rows.
fn vertex_descent(
    y: &[f64],
    w: &[f64],
    design: &[f64],
    m: usize,
    taus: &[f64],
    start: &[f64],
    scale: f64,
    max_pivots: usize,
) -> Option<DescentResult> {
    let n = y.len();
    let q = taus.len();
    let d = q + m;
    let nrows = n * q;
    let row_vec = |r: usize| -> Vec<f64> {
        let (k, i) = (r / n, r % n);
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        v[q..].copy_from_slice(&design[i * m..(i + 1) * m]);
        v
    };
    let residual = |theta: &[f64], r: usize| -> f64 {
        let (k, i) = (r / n, r % n);
        y[i] - theta[k]
            - (0..m)
                .map(|j| design[i * m + j] * theta[q + j])
                .sum::<f64>()
    };

    // Initial basis: greedy on |residual| with an orthogonality test.
    let mut order: Vec<usize> = (0..nrows).collect();
    let res0: Vec<f64> = (0..nrows).map(|r| residual(start, r).abs()).collect();
    order.sort_by(|&a, &b| res0[a].total_cmp(&res0[b]));
    let mut basis: Vec<usize> = Vec::with_capacity(d);
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(d);
    for &r in &order {
        let v = row_vec(r);
        let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut u = v.clone();
        for o in &ortho {
            let dot: f64 = u.iter().zip(o).map(|(a, b)| a * b).sum();
            for (ui, oi) in u.iter_mut().zip(o) {
                *ui -= dot * oi;
            }
        }
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu > 1e-8 * norm0 {
            for ui in u.iter_mut() {
                *ui /= nu;
            }
            ortho.push(u);
            basis.push(r);
            if basis.len() == d {
                break;
            }
        }
    }
    if basis.len() < d {
        return None;
    }

    let zero_tol = 1e-12 * scale.max(1e-300);
    let mut pivots = 0;
    let mut certified = false;
    let mut theta;
    let mut is_basic = vec![false; nrows];
    loop {
        let bmat = DMatrix::from_fn(d, d, |a, b| row_vec(basis[a])[b]);
        let yb = DVector::from_fn(d, |a, _| y[basis[a] % n]);
        let lu = bmat.lu();
        let sol = lu.solve(&yb)?;
        theta = sol.as_slice().to_vec();
        let binv = lu.try_inverse()?;
        is_basic.iter_mut().for_each(|b| *b = false);
        for &b in &basis {
            is_basic[b] = true;
        }
        let resid: Vec<f64> = (0..nrows).map(|r| residual(&theta, r)).collect();

        // Steepest descending edge.
        let mut best: Option<(f64, usize, f64)> = None;
        let mut s_best = vec![0.0; nrows];
        let mut s = vec![0.0; nrows];
        for p in 0..d {
            for sign in [1.0, -1.0] {
                let delta: Vec<f64> = (0..d).map(|a| sign * binv[(a, p)]).collect();
                let mut g = 0.0;
                for i in 0..n {
                    let e: f64 = (0..m).map(|j| design[i * m + j] * delta[q + j]).sum();
                    for k in 0..q {
                        let r = k * n + i;
                        let sj = delta[k] + e;
                        s[r] = sj;
                        if is_basic[r] && r != basis[p] {
                            continue;
                        }
                        let tau = taus[k];
                        let rr = if is_basic[r] { 0.0 } else { resid[r] };
                        let c = if rr < -zero_tol || (rr <= zero_tol && sj > 0.0) {
                            (1.0 - tau) * sj
                        } else {
                            -tau * sj
                        };
                        g += w[i] * c;
                    }
                }
                if best.is_none_or(|(bg, _, _)| g < bg) {
                    best = Some((g, p, sign));
                    s_best.copy_from_slice(&s);
                }
            }
        }
        let (g, p, sign) = best?;
        let wscale: f64 = w.iter().sum::<f64>();
        if g >= -1e-12 * wscale {
            certified = true;
            break;
        }
        if pivots >= max_pivots {
            break;
        }
        // Line search over breakpoints of the convex piecewise-linear ray.
        let mut bps: Vec<(f64, usize)> = Vec::new();
        for r in 0..nrows {
            if is_basic[r] {
                continue;
            }
            let rr = resid[r];
            let sj = s_best[r];
            if rr.abs() > zero_tol && sj != 0.0 {
                let t = rr / sj;
                if t > 0.0 {
                    bps.push((t, r));
                }
            }
        }
        bps.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut slope = g;
        let mut entering = None;
        for &(_, r) in &bps {
            slope += w[r % n] * s_best[r].abs();
            if slope >= 0.0 {
                entering = Some(r);
                break;
            }
        }
        let Some(r_in) = entering else { break };
        let _ = sign;
        basis[p] = r_in;
        pivots += 1;
    }
    Some(DescentResult {
        theta,
        certified,
        pivots,
    })
}

/// Local composite quantile fit at a point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcqrFit {
    pub q: usize,
    pub poly_order: usize,
    pub intercepts: Vec<f64>,
    /// Slopes `b_j` on `(x - point)^j` in the original units.
    pub slopes: Vec<f64>,
    pub cond_mean: f64,
    pub bandwidth: f64,
    pub n_effective: usize,
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(skip)]
    pub trace: Vec<f64>,
}

impl LcqrFit {
    /// Second derivative estimate `2 b_2` (requires `p >= 2`).
    pub fn second_derivative(&self) -> Option<f64> {
        self.slopes.get(1).map(|b| 2.0 * b)
    }
}

/// The local composite check-loss objective at `point`.
pub fn objective(
    x: &[f64],
    y: &[f64],
    point: f64,
    intercepts: &[f64],
    slopes: &[f64],
    bandwidth: f64,
    kernel: &KernelSpec,
) -> f64 {
    let taus = quantile_levels(intercepts.len());
    let mut total = 0.0;
    for i in 0..x.len() {
        let dx = x[i] - point;
        let wk = kernel.eval(dx / bandwidth);
        if wk == 0.0 {
            continue;
        }
        let mut fit = 0.0;
        let mut pw = 1.0;
        for b in slopes {
            pw *= dx;
            fit += b * pw;
        }
        for (k, &tau) in taus.iter().enumerate() {
            total += wk * check_loss(tau, y[i] - intercepts[k] - fit);
        }
    }
    total
}

/// Kernel-weighted points in the window with scaled offsets `u = (x - point)/h`.
pub(crate) fn window(
    x: &[f64],
    point: f64,
    bandwidth: f64,
    kernel: &KernelSpec,
) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut idx = Vec::new();
    let mut u = Vec::new();
    let mut w = Vec::new();
    for (i, &xi) in x.iter().enumerate() {
        let ui = (xi - point) / bandwidth;
        let k = kernel.eval(ui);
        if k > 0.0 {
            idx.push(i);
            u.push(ui);
            w.push(k);
        }
    }
    (idx, u, w)
}

fn distinct_count(v: &[f64]) -> usize {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    s.dedup();
    s.len()
}

/// Fits the local composite quantile polynomial of order `p` at `point`.
pub fn fit_boundary(
    x: &[f64],
    y: &[f64],
    point: f64,
    q: usize,
    p: usize,
    bandwidth: f64,
    kernel: &KernelSpec,
    opts: &SolverOptions,
) -> Result<LcqrFit> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(RdError::InvalidInput(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    if q == 0 || !(1..=3).contains(&p) {
        return Err(RdError::InvalidInput(format!(
            "need q >= 1 and p in 1..=3 (q={q}, p={p})"
        )));
    }
    let (idx, u, w) = window(x, point, bandwidth, kernel);
    let need = q + p + 1;
    if idx.len() < need || distinct_count(&u) < p + 1 {
        return Err(RdError::InsufficientData {
            side: if point >= 0.0 {
                "above".into()
            } else {
                "below".into()
            },
            have: idx.len(),
            need,
        });
    }
    let yy: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let mut design = Vec::with_capacity(u.len() * p);
    for &ui in &u {
        let mut pw = 1.0;
        for _ in 0..p {
            pw *= ui;
            design.push(pw);
        }
    }
    let taus = quantile_levels(q);
    let sol = solve_composite(&yy, &w, &design, p, &taus, opts)?;
    let slopes: Vec<f64> = sol
        .slopes
        .iter()
        .enumerate()
        .map(|(j, b)| b / bandwidth.powi(j as i32 + 1))
        .collect();
    let cond_mean = sol.intercepts.iter().sum::<f64>() / q as f64;
    Ok(LcqrFit {
        q,
        poly_order: p,
        intercepts: sol.intercepts.clone(),
        slopes,
        cond_mean,
        bandwidth,
        n_effective: idx.len(),
        objective_value: sol.objective,
        iterations: sol.iterations,
        converged: sol.converged(),
        trace: sol.trace,
    })
}

/// Covariate-adjusted pooled fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateFit {
    /// Coefficient on the treatment indicator.
    pub treatment_coef: f64,
    /// Coefficients on the retained covariates.
    pub covariate_coefs: Vec<f64>,
    /// Indices of covariate columns dropped because they are identically zero.
    pub dropped: Vec<usize>,
    pub n_effective: usize,
    pub objective_value: f64,
    pub converged: bool,
}

/// Pooled fit with columns `[u, T, T u, Z]`, `T = 1{x >= cutoff}`, sharing
/// one bandwidth across both sides.
pub fn fit_boundary_with_covariates(
    sample: &RdSample,
    q: usize,
    bandwidth: f64,
    kernel: &KernelSpec,
    opts: &SolverOptions,
) -> Result<CovariateFit> {
    let z = sample
        .z
        .as_ref()
        .ok_or_else(|| RdError::InvalidInput("covariates required".into()))?;
    let xc: Vec<f64> = sample.x.iter().map(|v| v - sample.cutoff).collect();
    let (idx, u, w) = window(&xc, 0.0, bandwidth, kernel);
    let kept: Vec<usize> = (0..z.len())
        .filter(|&j| idx.iter().any(|&i| z[j][i] != 0.0))
        .collect();
    let dropped: Vec<usize> = (0..z.len()).filter(|j| !kept.contains(j)).collect();
    let m = 3 + kept.len();
    let need = q + m + 1;
    let n_above = idx.iter().filter(|&&i| xc[i] >= 0.0).count();
    if idx.len() < need || n_above < 2 || idx.len() - n_above < 2 {
        return Err(RdError::InsufficientData {
            side: "pooled".into(),
            have: idx.len(),
            need,
        });
    }
    for &j in &kept {
        let first = z[j][idx[0]];
        if idx.iter().all(|&i| z[j][i] == first) {
            return Err(RdError::CollinearCovariates(format!(
                "covariate {j} is constant within the window"
            )));
        }
    }
    let yy: Vec<f64> = idx.iter().map(|&i| sample.y[i]).collect();
    let mut design = Vec::with_capacity(idx.len() * m);
    for (r, &i) in idx.iter().enumerate() {
        let t = if xc[i] >= 0.0 { 1.0 } else { 0.0 };
        design.push(u[r]);
        design.push(t);
        design.push(t * u[r]);
        for &j in &kept {
            design.push(z[j][i]);
        }
    }
    if !kept.is_empty() {
        let full = DMatrix::from_fn(idx.len(), m + 1, |r, c| {
            if c == 0 {
                w[r].sqrt()
            } else {
                w[r].sqrt() * design[r * m + c - 1]
            }
        });
        if rank(&full, 1e-10) < m + 1 {
            return Err(RdError::CollinearCovariates("rank-deficient design".into()));
        }
        let ys: Vec<f64> = idx.iter().map(|&i| sample.y[i]).collect();
        let ylin = DMatrix::from_fn(idx.len(), m + 2, |r, c| {
            if c == m + 1 {
                w[r].sqrt() * ys[r]
            } else {
                full[(r, c)]
            }
        });
        let yscale = weighted_scale(&ys, &w);
        if yscale > 0.0 && rank(&ylin, 1e-12) < m + 2 {
            return Err(RdError::CollinearCovariates(
                "covariates reproduce the outcome exactly".into(),
            ));
        }
    }
    let taus = quantile_levels(q);
    let sol = solve_composite(&yy, &w, &design, m, &taus, opts)?;
    Ok(CovariateFit {
        treatment_coef: sol.slopes[1],
        covariate_coefs: sol.slopes[3..].to_vec(),
        dropped,
        n_effective: idx.len(),
        objective_value: sol.objective,
        converged: sol.converged(),
    })
}
