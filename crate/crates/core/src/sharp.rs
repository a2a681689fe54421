//! Sharp-design estimation and inference: point estimate, bias correction,
//! plain and adjusted standard errors in asymptotic or fixed-n form, and the
//! derivative-jump (kink) estimate.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bandwidth::{fit_quartic, select_rule_of_thumb};
use crate::error::{RdError, Result};
use crate::kernels::{one_sided_moments, KernelSpec, Side};
use crate::lcqr::{fit_boundary, LcqrFit, SolverOptions};
use crate::nuisance::{
    estimate_grid_discrete, estimate_nuisances, estimate_sigma_fx, NuisanceEstimates,
};
use crate::sample::RdSample;
use crate::sandwich::{
    block11_sum, block12_second_sum, block22_second, build_asymptotic, build_fixed_n,
    empirical_moments, SandwichMode, SandwichSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    Sharp,
    Fuzzy,
    Kink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureSource {
    Lcqr,
    Quartic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub q: usize,
    pub kernel: KernelSpec,
    pub mode: SandwichMode,
    pub level: f64,
    pub tau0: f64,
    pub symmetrize: bool,
    #[serde(skip)]
    pub solver: SolverOptions,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            q: 7,
            kernel: KernelSpec::triangular(),
            mode: SandwichMode::Asymptotic,
            level: 0.95,
            tau0: 0.0,
            symmetrize: true,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    pub h_plus: f64,
    pub h_minus: f64,
    pub h_t_plus: Option<f64>,
    pub h_t_minus: Option<f64>,
}

impl Bandwidths {
    pub fn new(h_plus: f64, h_minus: f64) -> Self {
        Bandwidths {
            h_plus,
            h_minus,
            h_t_plus: None,
            h_t_minus: None,
        }
    }

    pub fn equal(h: f64) -> Self {
        Self::new(h, h)
    }

    pub fn outcome(&self, side: Side) -> f64 {
        match side {
            Side::Above => self.h_plus,
            Side::Below => self.h_minus,
        }
    }

    /// Treatment-equation bandwidth, defaulting to the outcome bandwidth.
    pub fn treatment(&self, side: Side) -> f64 {
        match side {
            Side::Above => self.h_t_plus.unwrap_or(self.h_plus),
            Side::Below => self.h_t_minus.unwrap_or(self.h_minus),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn centered(center: f64, half: f64) -> Self {
        Interval {
            lo: center - half,
            hi: center + half,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideDiagnostics {
    pub side: Side,
    pub bandwidth: f64,
    pub n_effective: usize,
    pub sigma: f64,
    pub fx: f64,
    pub pilot_bandwidth: f64,
    pub second_derivative: f64,
    pub curvature_source: CurvatureSource,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub estimand: Estimand,
    pub point: f64,
    pub bias_hat: f64,
    pub point_bc: f64,
    pub se_plain: f64,
    pub se_adjusted: f64,
    pub t_plain: f64,
    pub t_adjusted: f64,
    pub p_value_adjusted: f64,
    pub ci_plain: Interval,
    pub ci_adjusted: Interval,
    pub level: f64,
    pub mode: SandwichMode,
    pub tau0: f64,
    pub bandwidths: Bandwidths,
    pub n_eff: Vec<usize>,
    pub sides: Vec<SideDiagnostics>,
    pub notes: Vec<String>,
}

pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(RdError::InvalidInput(format!(
            "level must be in (0, 1), got {level}"
        )));
    }
    Ok(Normal::standard().inverse_cdf(0.5 + 0.5 * level))
}

pub fn two_sided_p(t: f64) -> f64 {
    2.0 * (1.0 - Normal::standard().cdf(t.abs()))
}

pub(crate) fn relabel<T>(r: Result<T>, side: Side) -> Result<T> {
    r.map_err(|e| match e {
        RdError::InsufficientData { have, need, .. } => RdError::InsufficientData {
            side: side.name().into(),
            have,
            need,
        },
        other => other,
    })
}

/// One outcome equation on one side: fits, nuisances and the sandwich pieces
/// its variance terms are built from.
#[derive(Debug, Clone)]
pub struct EquationSide {
    pub side: Side,
    pub h: f64,
    pub n: usize,
    pub fit1: LcqrFit,
    pub m2: f64,
    pub curvature_source: CurvatureSource,
    pub nuisance: NuisanceEstimates,
    pub mode: SandwichMode,
    /// Order-1 and order-2 sets; absent when the error scale vanishes.
    pub set1: Option<SandwichSet>,
    pub set2: Option<SandwichSet>,
    /// Bias factor: `Bias = d m'' h^2`.
    pub d: f64,
    /// Density normalization: `f_X(0)` asymptotically, one in fixed-n form.
    pub f_norm: f64,
}

impl EquationSide {
    pub fn sigma(&self) -> f64 {
        self.nuisance.sigma_at_cutoff
    }

    pub fn mean(&self) -> f64 {
        self.fit1.cond_mean
    }

    pub fn bias(&self) -> f64 {
        self.d * self.m2 * self.h * self.h
    }

    pub fn q(&self) -> usize {
        self.fit1.q
    }

    pub fn diagnostics(&self) -> SideDiagnostics {
        SideDiagnostics {
            side: self.side,
            bandwidth: self.h,
            n_effective: self.fit1.n_effective,
            sigma: self.sigma(),
            fx: self.nuisance.fx_at_cutoff,
            pilot_bandwidth: self.nuisance.pilot_bandwidth,
            second_derivative: self.m2,
            curvature_source: self.curvature_source,
            converged: self.fit1.converged,
        }
    }

    /// Variance of the conditional mean, of its bias estimate, and their covariance.
    pub fn own_terms(&self) -> OwnTerms {
        let (Some(s1), Some(s2)) = (&self.set1, &self.set2) else {
            return OwnTerms::default();
        };
        let q = self.q() as f64;
        let base = self.sigma().powi(2) / (self.n as f64 * self.h * self.f_norm);
        let v1 = s1.sandwich();
        let v2 = s2.sandwich();
        let qi = self.q();
        OwnTerms {
            var_m: base * block11_sum(&v1, qi) / (q * q),
            var_b: base * 4.0 * self.d * self.d * block22_second(&v2, qi),
            cov_mb: base * 2.0 * self.d * block12_second_sum(&v2, qi) / q,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OwnTerms {
    pub var_m: f64,
    pub var_b: f64,
    pub cov_mb: f64,
}

impl OwnTerms {
    pub fn adjusted(&self) -> f64 {
        self.var_m + self.var_b - 2.0 * self.cov_mb
    }
}

/// Bias factor in fixed-n form.
fn fixed_n_bias_factor(
    set1: &SandwichSet,
    f: &[f64],
    x: &[f64],
    h: f64,
    kernel: &KernelSpec,
) -> f64 {
    let q = set1.q;
    let em = empirical_moments(x, h, kernel, 3);
    let ftot: f64 = f.iter().sum();
    let mut acc = 0.0;
    for k in 0..q {
        let a: f64 = (0..q).map(|l| set1.s_inv[(k, l)] * f[l]).sum::<f64>() * 0.5 * em.m[2];
        let b = set1.s_inv[(k, q)] * ftot * 0.5 * em.m[3];
        acc += a + b;
    }
    acc / q as f64
}

/// Second derivative at the cutoff from the order-2 fit, or the global quartic.
fn curvature(
    x: &[f64],
    y: &[f64],
    side: Side,
    h: f64,
    cfg: &InferenceConfig,
) -> Result<(f64, CurvatureSource)> {
    if let Ok(fit2) = fit_boundary(x, y, 0.0, cfg.q, 2, h, &cfg.kernel, &cfg.solver) {
        if fit2.converged {
            if let Some(m2) = fit2.second_derivative() {
                if m2.is_finite() {
                    return Ok((m2, CurvatureSource::Lcqr));
                }
            }
        }
    }
    let quartic = fit_quartic(x, y, side)?;
    Ok((
        quartic.second_derivative_at_cutoff(),
        CurvatureSource::Quartic,
    ))
}

/// Pilot bandwidth used for the nuisance quantities on one side.
pub fn pilot_bandwidth(x: &[f64], y: &[f64], side: Side, cfg: &InferenceConfig) -> Result<f64> {
    Ok(select_rule_of_thumb(x, y, side, cfg.q, &cfg.kernel)?.0)
}

/// Outcome equations need a continuous error; treatment equations may be
/// binary or even constant (their variance terms are then zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquationRole {
    Outcome,
    Treatment,
}

/// Analysis of one equation on one side.
pub fn analyze_equation(
    x: &[f64],
    y: &[f64],
    side: Side,
    h: f64,
    pilot_h: f64,
    cfg: &InferenceConfig,
    role: EquationRole,
) -> Result<EquationSide> {
    let fit1 = relabel(
        fit_boundary(x, y, 0.0, cfg.q, 1, h, &cfg.kernel, &cfg.solver),
        side,
    )?;
    let (m2, curvature_source) = relabel(curvature(x, y, side, h, cfg), side)?;
    let nuisance = match role {
        EquationRole::Outcome => relabel(
            estimate_nuisances(x, y, side, pilot_h, &cfg.kernel, cfg.q, cfg.symmetrize),
            side,
        )?,
        EquationRole::Treatment => {
            let mut n = relabel(estimate_sigma_fx(x, y, side, pilot_h, &cfg.kernel), side)?;
            if n.sigma_at_cutoff > 0.0 {
                n.grid = Some(estimate_grid_discrete(&n.residuals, cfg.q)?);
            }
            n
        }
    };
    let moments = one_sided_moments(&cfg.kernel, side, 7)?;
    let (set1, set2, d, f_norm) = match &nuisance.grid {
        None => (None, None, moments.a() / 2.0, 1.0),
        Some(grid) => match cfg.mode {
            SandwichMode::Asymptotic => {
                let s1 = build_asymptotic(&moments, grid, 1)?;
                let s2 = build_asymptotic(&moments, grid, 2)?;
                (Some(s1), Some(s2), moments.a() / 2.0, nuisance.fx_at_cutoff)
            }
            SandwichMode::FixedN => {
                let s1 = relabel(build_fixed_n(x, grid, h, &cfg.kernel, 1), side)?;
                let s2 = relabel(build_fixed_n(x, grid, h, &cfg.kernel, 2), side)?;
                let d = fixed_n_bias_factor(&s1, &grid.f_at_c, x, h, &cfg.kernel);
                (Some(s1), Some(s2), d, 1.0)
            }
        },
    };
    Ok(EquationSide {
        side,
        h,
        n: x.len(),
        fit1,
        m2,
        curvature_source,
        nuisance,
        mode: cfg.mode,
        set1,
        set2,
        d,
        f_norm,
    })
}

/// `tau_hat = m_plus(0) - m_minus(0)` with the two order-1 fits.
pub fn estimate_sharp(
    sample: &RdSample,
    q: usize,
    bw: &Bandwidths,
    kernel: &KernelSpec,
    opts: &SolverOptions,
) -> Result<(f64, LcqrFit, LcqrFit)> {
    let above = sample.side(Side::Above);
    let below = sample.side(Side::Below);
    let fp = relabel(
        fit_boundary(&above.x, &above.y, 0.0, q, 1, bw.h_plus, kernel, opts),
        Side::Above,
    )?;
    let fm = relabel(
        fit_boundary(&below.x, &below.y, 0.0, q, 1, bw.h_minus, kernel, opts),
        Side::Below,
    )?;
    Ok((fp.cond_mean - fm.cond_mean, fp, fm))
}

/// Both sides of a sharp design, ready for assembly.
#[derive(Debug, Clone)]
pub struct SharpAnalysis {
    pub plus: EquationSide,
    pub minus: EquationSide,
}

impl SharpAnalysis {
    pub fn point(&self) -> f64 {
        self.plus.mean() - self.minus.mean()
    }

    pub fn bias(&self) -> f64 {
        self.plus.bias() - self.minus.bias()
    }

    pub fn var_plain(&self) -> f64 {
        self.plus.own_terms().var_m + self.minus.own_terms().var_m
    }

    pub fn var_adjusted(&self) -> f64 {
        self.plus.own_terms().adjusted() + self.minus.own_terms().adjusted()
    }
}

pub fn analyze_sharp(
    sample: &RdSample,
    bw: &Bandwidths,
    cfg: &InferenceConfig,
) -> Result<SharpAnalysis> {
    let above = sample.side(Side::Above);
    let below = sample.side(Side::Below);
    let pp = relabel(
        pilot_bandwidth(&above.x, &above.y, Side::Above, cfg),
        Side::Above,
    )?;
    let pm = relabel(
        pilot_bandwidth(&below.x, &below.y, Side::Below, cfg),
        Side::Below,
    )?;
    let plus = analyze_equation(
        &above.x,
        &above.y,
        Side::Above,
        bw.h_plus,
        pp,
        cfg,
        EquationRole::Outcome,
    )?;
    let minus = analyze_equation(
        &below.x,
        &below.y,
        Side::Below,
        bw.h_minus,
        pm,
        cfg,
        EquationRole::Outcome,
    )?;
    Ok(SharpAnalysis { plus, minus })
}

/// Bias estimate and plain variance.
pub fn bias_and_variance(analysis: &SharpAnalysis) -> (f64, f64) {
    (analysis.bias(), analysis.var_plain())
}

/// Bias-corrected, variance-adjusted inference from an analysis.
pub fn adjusted_inference(
    analysis: &SharpAnalysis,
    bw: &Bandwidths,
    cfg: &InferenceConfig,
) -> Result<InferenceResult> {
    let z = normal_quantile(cfg.level)?;
    let point = analysis.point();
    let bias_hat = analysis.bias();
    let var_plain = analysis.var_plain();
    let var_adj = analysis.var_adjusted();
    if !(var_adj > 0.0) || !var_adj.is_finite() {
        return Err(RdError::NegativeAdjustedVariance(var_adj));
    }
    if !(var_plain > 0.0) {
        return Err(RdError::DegenerateResiduals);
    }
    let se_plain = var_plain.sqrt();
    let se_adjusted = var_adj.sqrt();
    let point_bc = point - bias_hat;
    let t_adjusted = (point_bc - cfg.tau0) / se_adjusted;
    let mut notes = Vec::new();
    for s in [&analysis.plus, &analysis.minus] {
        if s.curvature_source == CurvatureSource::Quartic {
            notes.push(format!(
                "{}: second derivative from the global quartic fit",
                s.side.name()
            ));
        }
        if !s.fit1.converged {
            notes.push(format!("{}: solver did not converge", s.side.name()));
        }
    }
    Ok(InferenceResult {
        estimand: Estimand::Sharp,
        point,
        bias_hat,
        point_bc,
        se_plain,
        se_adjusted,
        t_plain: (point - cfg.tau0) / se_plain,
        t_adjusted,
        p_value_adjusted: two_sided_p(t_adjusted),
        ci_plain: Interval::centered(point, z * se_plain),
        ci_adjusted: Interval::centered(point_bc, z * se_adjusted),
        level: cfg.level,
        mode: cfg.mode,
        tau0: cfg.tau0,
        bandwidths: *bw,
        n_eff: vec![
            analysis.plus.fit1.n_effective,
            analysis.minus.fit1.n_effective,
        ],
        sides: vec![analysis.plus.diagnostics(), analysis.minus.diagnostics()],
        notes,
    })
}

pub fn sharp_inference(
    sample: &RdSample,
    bw: &Bandwidths,
    cfg: &InferenceConfig,
) -> Result<InferenceResult> {
    let analysis = analyze_sharp(sample, bw, cfg)?;
    adjusted_inference(&analysis, bw, cfg)
}

/// Jump in the first derivative from order-3 fits, with a plain fixed-n slope s.e.
pub fn estimate_kink(sample: &RdSample, h: f64, cfg: &InferenceConfig) -> Result<InferenceResult> {
    let z = normal_quantile(cfg.level)?;
    let mut slopes = Vec::with_capacity(2);
    let mut var = 0.0;
    let mut n_eff = Vec::with_capacity(2);
    let mut sides = Vec::with_capacity(2);
    for side in [Side::Above, Side::Below] {
        let d = sample.side(side);
        let fit = relabel(
            fit_boundary(&d.x, &d.y, 0.0, cfg.q, 3, h, &cfg.kernel, &cfg.solver),
            side,
        )?;
        let pilot = relabel(pilot_bandwidth(&d.x, &d.y, side, cfg), side)?;
        let nuis = relabel(
            estimate_nuisances(&d.x, &d.y, side, pilot, &cfg.kernel, cfg.q, cfg.symmetrize),
            side,
        )?;
        let grid = nuis.grid.as_ref().ok_or(RdError::DegenerateResiduals)?;
        let set3 = relabel(build_fixed_n(&d.x, grid, h, &cfg.kernel, 3), side)?;
        let v = set3.sandwich();
        let q = cfg.q;
        var += nuis.sigma_at_cutoff.powi(2) * v[(q, q)] / (d.x.len() as f64 * h.powi(3));
        slopes.push(fit.slopes[0]);
        n_eff.push(fit.n_effective);
        sides.push(SideDiagnostics {
            side,
            bandwidth: h,
            n_effective: fit.n_effective,
            sigma: nuis.sigma_at_cutoff,
            fx: nuis.fx_at_cutoff,
            pilot_bandwidth: pilot,
            second_derivative: fit.second_derivative().unwrap_or(f64::NAN),
            curvature_source: CurvatureSource::Lcqr,
            converged: fit.converged,
        });
    }
    let point = slopes[0] - slopes[1];
    if !(var > 0.0) {
        return Err(RdError::DegenerateResiduals);
    }
    let se = var.sqrt();
    let t = (point - cfg.tau0) / se;
    Ok(InferenceResult {
        estimand: Estimand::Kink,
        point,
        bias_hat: 0.0,
        point_bc: point,
        se_plain: se,
        se_adjusted: se,
        t_plain: t,
        t_adjusted: t,
        p_value_adjusted: two_sided_p(t),
        ci_plain: Interval::centered(point, z * se),
        ci_adjusted: Interval::centered(point, z * se),
        level: cfg.level,
        mode: SandwichMode::FixedN,
        tau0: cfg.tau0,
        bandwidths: Bandwidths::equal(h),
        n_eff,
        sides,
        notes: vec!["experimental: no bias correction; fixed-n slope standard error".into()],
    })
}
