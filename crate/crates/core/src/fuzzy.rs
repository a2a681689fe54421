//! Fuzzy designs: ratio estimate, the null-restricted bias-corrected
//! adjusted t statistic, and confidence sets by test inversion.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};
use crate::kernels::Side;
use crate::nuisance::estimate_phi;
use crate::sample::RdSample;
use crate::sandwich::{block11_sum, empirical_cross_moments, sigma_matrix, SandwichMode};
use crate::sharp::{
    analyze_equation, normal_quantile, pilot_bandwidth, relabel, two_sided_p, Bandwidths,
    EquationRole, EquationSide, Estimand, InferenceConfig, InferenceResult, Interval,
};

/// Treatment jumps smaller than this in absolute value are treated as unidentified.
pub const WEAK_ID_THRESHOLD: f64 = 0.05;

/// Grid size and half-width (in plain standard errors) for test inversion.
pub const INVERSION_POINTS: usize = 201;
pub const INVERSION_SPAN: f64 = 6.0;

/// Covariances between the outcome and treatment equations on one side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CrossTerms {
    /// `Cov(m_Y, m_T)`.
    pub cov_mm: f64,
    /// `Cov(Bias_Y, Bias_T)`.
    pub cov_bb: f64,
    /// `Cov(m_Y, Bias_T)`.
    pub cov_my_bt: f64,
    /// `Cov(m_T, Bias_Y)`.
    pub cov_mt_by: f64,
}

impl CrossTerms {
    /// `Cov(m_Y - Bias_Y, m_T - Bias_T)`.
    pub fn corrected(&self) -> f64 {
        self.cov_mm + self.cov_bb - self.cov_my_bt - self.cov_mt_by
    }
}

#[derive(Debug, Clone)]
pub struct FuzzySide {
    pub side: Side,
    pub y: EquationSide,
    pub t: EquationSide,
    pub cross: CrossTerms,
}

impl FuzzySide {
    /// Plain variance of `m_Y - tau0 m_T`.
    pub fn var_plain(&self, tau0: f64) -> f64 {
        let oy = self.y.own_terms();
        let ot = self.t.own_terms();
        oy.var_m + tau0 * tau0 * ot.var_m - 2.0 * tau0 * self.cross.cov_mm
    }

    /// Variance of `(m_Y - Bias_Y) - tau0 (m_T - Bias_T)`.
    pub fn var_adjusted(&self, tau0: f64) -> f64 {
        self.y.own_terms().adjusted() + tau0 * tau0 * self.t.own_terms().adjusted()
            - 2.0 * tau0 * self.cross.corrected()
    }
}

fn cross_terms(
    y: &EquationSide,
    t: &EquationSide,
    x: &[f64],
    cfg: &InferenceConfig,
) -> Result<CrossTerms> {
    let (Some(gy), Some(gt)) = (&y.nuisance.grid, &t.nuisance.grid) else {
        return Ok(CrossTerms::default());
    };
    let (Some(y1), Some(y2), Some(t1), Some(t2)) = (&y.set1, &y.set2, &t.set1, &t.set2) else {
        return Ok(CrossTerms::default());
    };
    let phi = estimate_phi(&y.nuisance.residuals, &t.nuisance.residuals, gy, gt);
    let sigma_yt = |p: usize| -> Result<DMatrix<f64>> {
        Ok(match cfg.mode {
            SandwichMode::Asymptotic => {
                let mo = crate::kernels::one_sided_moments(&cfg.kernel, y.side, 7)?;
                sigma_matrix(&phi, &mo.nu, p)
            }
            SandwichMode::FixedN => {
                let v = empirical_cross_moments(x, y.h, t.h, &cfg.kernel, 2 * p);
                sigma_matrix(&phi, &v, p)
            }
        })
    };
    let m1 = &y1.s_inv * sigma_yt(1)? * &t1.s_inv;
    let m2 = &y2.s_inv * sigma_yt(2)? * &t2.s_inv;
    let q = y.q();
    let qf = q as f64;
    let base = y.sigma() * t.sigma() / (y.n as f64 * (y.h * t.h).sqrt() * y.f_norm);
    Ok(CrossTerms {
        cov_mm: base * block11_sum(&m1, q) / (qf * qf),
        cov_bb: base * 4.0 * y.d * t.d * m2[(q + 1, q + 1)],
        cov_my_bt: base * 2.0 * t.d * (0..q).map(|k| m2[(k, q + 1)]).sum::<f64>() / qf,
        cov_mt_by: base * 2.0 * y.d * (0..q).map(|k| m2[(q + 1, k)]).sum::<f64>() / qf,
    })
}

fn analyze_side(
    sample: &RdSample,
    side: Side,
    bw: &Bandwidths,
    cfg: &InferenceConfig,
) -> Result<FuzzySide> {
    let d = sample.side(side);
    let td = d
        .treatment_as_outcome()
        .ok_or_else(|| RdError::MissingColumn("t".into()))?;
    let pilot = relabel(pilot_bandwidth(&d.x, &d.y, side, cfg), side)?;
    let y = analyze_equation(
        &d.x,
        &d.y,
        side,
        bw.outcome(side),
        pilot,
        cfg,
        EquationRole::Outcome,
    )?;
    let t = analyze_equation(
        &td.x,
        &td.y,
        side,
        bw.treatment(side),
        pilot,
        cfg,
        EquationRole::Treatment,
    )?;
    let cross = cross_terms(&y, &t, &d.x, cfg)?;
    Ok(FuzzySide { side, y, t, cross })
}

/// All four boundary fits and the per-side covariance terms.
#[derive(Debug, Clone)]
pub struct FuzzyComponents {
    pub plus: FuzzySide,
    pub minus: FuzzySide,
}

impl FuzzyComponents {
    /// `m_Y+ - m_Y-`.
    pub fn numerator(&self) -> f64 {
        self.plus.y.mean() - self.minus.y.mean()
    }

    /// `m_T+ - m_T-`.
    pub fn denominator(&self) -> f64 {
        self.plus.t.mean() - self.minus.t.mean()
    }

    pub fn weakly_identified(&self) -> bool {
        !(self.denominator().abs() >= WEAK_ID_THRESHOLD)
    }

    /// Ratio estimate, or `None` under weak identification.
    pub fn tau_hat(&self) -> Option<f64> {
        if self.weakly_identified() {
            None
        } else {
            Some(self.numerator() / self.denominator())
        }
    }

    /// Null-restricted contrast `(m_Y+ - tau0 m_T+) - (m_Y- - tau0 m_T-)`.
    pub fn contrast(&self, tau0: f64) -> f64 {
        self.numerator() - tau0 * self.denominator()
    }

    pub fn contrast_bias(&self, tau0: f64) -> f64 {
        (self.plus.y.bias() - tau0 * self.plus.t.bias())
            - (self.minus.y.bias() - tau0 * self.minus.t.bias())
    }

    pub fn var_plain(&self, tau0: f64) -> f64 {
        self.plus.var_plain(tau0) + self.minus.var_plain(tau0)
    }

    pub fn var_adjusted(&self, tau0: f64) -> f64 {
        self.plus.var_adjusted(tau0) + self.minus.var_adjusted(tau0)
    }

    /// Bias-corrected adjusted t statistic at `tau0`.
    pub fn t_adjusted(&self, tau0: f64) -> Result<f64> {
        let v = self.var_adjusted(tau0);
        if !(v > 0.0) || !v.is_finite() {
            return Err(RdError::NegativeAdjustedVariance(v));
        }
        Ok((self.contrast(tau0) - self.contrast_bias(tau0)) / v.sqrt())
    }
}

pub fn analyze_fuzzy(
    sample: &RdSample,
    bw: &Bandwidths,
    cfg: &InferenceConfig,
) -> Result<FuzzyComponents> {
    if sample.t.is_none() {
        return Err(RdError::MissingColumn("t".into()));
    }
    let plus = analyze_side(sample, Side::Above, bw, cfg)?;
    let minus = analyze_side(sample, Side::Below, bw, cfg)?;
    Ok(FuzzyComponents { plus, minus })
}

/// Ratio of boundary jumps; fails with `WeakIdentification` below the threshold.
pub fn estimate_fuzzy(
    sample: &RdSample,
    bw: &Bandwidths,
    cfg: &InferenceConfig,
) -> Result<(f64, FuzzyComponents)> {
    let comp = analyze_fuzzy(sample, bw, cfg)?;
    match comp.tau_hat() {
        Some(t) => Ok((t, comp)),
        None => Err(RdError::WeakIdentification(comp.denominator().abs())),
    }
}

/// Confidence set from inverting the adjusted test over a grid of null values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedInterval {
    /// `None` when the accepted region reaches the grid edge.
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub points: usize,
    pub accepted: usize,
    /// Accepted points do not form one run.
    pub disjoint: bool,
}

pub fn invert_test(
    comp: &FuzzyComponents,
    level: f64,
    center: f64,
    half_width: f64,
) -> Result<InvertedInterval> {
    let z = normal_quantile(level)?;
    if !(half_width > 0.0) || !half_width.is_finite() || !center.is_finite() {
        return Err(RdError::InvalidInput(
            "inversion grid must have a positive finite span".into(),
        ));
    }
    let n = INVERSION_POINTS;
    let lo = center - half_width;
    let step = 2.0 * half_width / (n - 1) as f64;
    let grid: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
    let accept: Vec<bool> = grid
        .par_iter()
        .map(|&t0| comp.t_adjusted(t0).map(|t| t.abs() <= z).unwrap_or(false))
        .collect();
    let idx: Vec<usize> = (0..n).filter(|&i| accept[i]).collect();
    let (first, last) = match (idx.first(), idx.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => {
            return Ok(InvertedInterval {
                lo: None,
                hi: None,
                grid_lo: grid[0],
                grid_hi: grid[n - 1],
                points: n,
                accepted: 0,
                disjoint: false,
            })
        }
    };
    Ok(InvertedInterval {
        lo: if first == 0 { None } else { Some(grid[first]) },
        hi: if last == n - 1 {
            None
        } else {
            Some(grid[last])
        },
        grid_lo: grid[0],
        grid_hi: grid[n - 1],
        points: n,
        accepted: idx.len(),
        disjoint: last - first + 1 != idx.len(),
    })
}

/// Fuzzy quantities that do not fit the common result record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzyDetails {
    pub tau_hat: Option<f64>,
    pub numerator: f64,
    pub denominator: f64,
    pub weak_identification: bool,
    pub inverted_ci: Option<InvertedInterval>,
}

/// Null-restricted test at `cfg.tau0`. The record's `point`, `bias_hat` and
/// intervals refer to the contrast `m_Y jump - tau0 m_T jump`; the ratio and
/// the inverted set are in the details.
pub fn null_restricted_test(
    sample: &RdSample,
    bw: &Bandwidths,
    cfg: &InferenceConfig,
    invert: bool,
) -> Result<(InferenceResult, FuzzyDetails)> {
    let comp = analyze_fuzzy(sample, bw, cfg)?;
    fuzzy_result(&comp, bw, cfg, invert)
}

pub fn fuzzy_result(
    comp: &FuzzyComponents,
    bw: &Bandwidths,
    cfg: &InferenceConfig,
    invert: bool,
) -> Result<(InferenceResult, FuzzyDetails)> {
    let z = normal_quantile(cfg.level)?;
    let tau0 = cfg.tau0;
    if !tau0.is_finite() {
        return Err(RdError::InvalidInput("tau0 must be finite".into()));
    }
    let point = comp.contrast(tau0);
    let bias_hat = comp.contrast_bias(tau0);
    let vp = comp.var_plain(tau0);
    let va = comp.var_adjusted(tau0);
    if !(va > 0.0) || !va.is_finite() {
        return Err(RdError::NegativeAdjustedVariance(va));
    }
    if !(vp > 0.0) {
        return Err(RdError::DegenerateResiduals);
    }
    let (se_plain, se_adjusted) = (vp.sqrt(), va.sqrt());
    let point_bc = point - bias_hat;
    let t_adjusted = point_bc / se_adjusted;
    let tau_hat = comp.tau_hat();
    let den = comp.denominator();
    let mut notes =
        vec!["point, bias and intervals refer to the null-restricted contrast at tau0".to_string()];
    if tau_hat.is_none() {
        notes.push(format!(
            "weak identification: |treatment jump| = {:.4e} < {WEAK_ID_THRESHOLD}; ratio suppressed",
            den.abs()
        ));
    }
    let inverted_ci = if invert {
        let center = tau_hat.unwrap_or(tau0);
        let scale = den.abs().max(WEAK_ID_THRESHOLD);
        let se_ratio = comp.var_plain(center).max(0.0).sqrt() / scale;
        let half = INVERSION_SPAN * if se_ratio > 0.0 { se_ratio } else { 1.0 };
        Some(invert_test(comp, cfg.level, center, half)?)
    } else {
        None
    };
    let diag = |s: &FuzzySide| [s.y.diagnostics(), s.t.diagnostics()];
    let mut sides = Vec::with_capacity(4);
    sides.extend(diag(&comp.plus));
    sides.extend(diag(&comp.minus));
    let result = InferenceResult {
        estimand: Estimand::Fuzzy,
        point,
        bias_hat,
        point_bc,
        se_plain,
        se_adjusted,
        t_plain: point / se_plain,
        t_adjusted,
        p_value_adjusted: two_sided_p(t_adjusted),
        ci_plain: Interval::centered(point, z * se_plain),
        ci_adjusted: Interval::centered(point_bc, z * se_adjusted),
        level: cfg.level,
        mode: cfg.mode,
        tau0,
        bandwidths: Bandwidths {
            h_t_plus: Some(bw.treatment(Side::Above)),
            h_t_minus: Some(bw.treatment(Side::Below)),
            ..*bw
        },
        n_eff: vec![
            comp.plus.y.fit1.n_effective,
            comp.minus.y.fit1.n_effective,
            comp.plus.t.fit1.n_effective,
            comp.minus.t.fit1.n_effective,
        ],
        sides,
        notes,
    };
    let details = FuzzyDetails {
        tau_hat,
        numerator: comp.numerator(),
        denominator: den,
        weak_identification: tau_hat.is_none(),
        inverted_ci,
    };
    Ok((result, details))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::montecarlo::{draw_sample, replication_rng, DgpSpec, FuzzyOverlay, MeanModel};
    use crate::sharp::analyze_sharp;

    fn fuzzy_sample(n: usize, seed: u64) -> RdSample {
        let mut spec = DgpSpec::new(MeanModel::Lee, 1, false, n);
        spec.fuzzy = Some(FuzzyOverlay::default());
        draw_sample(&spec, &mut replication_rng(seed, 0)).unwrap()
    }

    fn sharp_compliance(n: usize, seed: u64) -> RdSample {
        let s = draw_sample(
            &DgpSpec::new(MeanModel::Lee, 1, false, n),
            &mut replication_rng(seed, 0),
        )
        .unwrap();
        let t =
            s.x.iter()
                .map(|&x| if x >= 0.0 { 1.0 } else { 0.0 })
                .collect();
        s.with_treatment(t).unwrap()
    }

    #[test]
    fn sharp_compliance_reduces_to_sharp() {
        let s = sharp_compliance(600, 3);
        let bw = Bandwidths::equal(0.4);
        let cfg = InferenceConfig::default();
        let comp = analyze_fuzzy(&s, &bw, &cfg).unwrap();
        assert!((comp.denominator() - 1.0).abs() < 1e-9);
        let sharp = analyze_sharp(&s, &bw, &cfg).unwrap();
        assert!((comp.tau_hat().unwrap() - sharp.point()).abs() < 1e-8);
        assert!((comp.var_adjusted(0.0) - sharp.var_adjusted()).abs() < 1e-10);
    }

    #[test]
    fn zero_null_terms_reduce_to_outcome_equation() {
        let s = fuzzy_sample(800, 5);
        let cfg = InferenceConfig::default();
        let comp = analyze_fuzzy(&s, &Bandwidths::equal(0.4), &cfg).unwrap();
        let own = comp.plus.y.own_terms().adjusted() + comp.minus.y.own_terms().adjusted();
        assert!((comp.var_adjusted(0.0) - own).abs() < 1e-14);
    }

    #[test]
    fn flat_compliance_is_weak() {
        let s = draw_sample(
            &DgpSpec::new(MeanModel::Lee, 1, false, 800),
            &mut replication_rng(8, 0),
        )
        .unwrap();
        let t: Vec<f64> = (0..s.x.len())
            .map(|i| if i % 10 < 3 { 1.0 } else { 0.0 })
            .collect();
        let s = s.with_treatment(t).unwrap();
        let bw = Bandwidths::equal(0.5);
        let cfg = InferenceConfig::default();
        assert!(matches!(
            estimate_fuzzy(&s, &bw, &cfg),
            Err(RdError::WeakIdentification(_))
        ));
        let (res, det) = null_restricted_test(&s, &bw, &cfg, false).unwrap();
        assert!(det.weak_identification);
        assert!(res.se_adjusted > 0.0);
    }

    #[test]
    fn outcome_shift_leaves_statistic_unchanged() {
        let s = fuzzy_sample(800, 11);
        let mut shifted = s.clone();
        shifted.y.iter_mut().for_each(|v| *v += 2.5);
        let bw = Bandwidths::equal(0.4);
        let cfg = InferenceConfig {
            tau0: 0.1,
            ..Default::default()
        };
        let a = analyze_fuzzy(&s, &bw, &cfg)
            .unwrap()
            .t_adjusted(0.1)
            .unwrap();
        let b = analyze_fuzzy(&shifted, &bw, &cfg)
            .unwrap()
            .t_adjusted(0.1)
            .unwrap();
        assert!((a - b).abs() < 1e-6, "{a} {b}");
    }

    #[test]
    fn inverted_set_contains_estimate() {
        let s = fuzzy_sample(1500, 2);
        let cfg = InferenceConfig::default();
        let (_, det) = null_restricted_test(&s, &Bandwidths::equal(0.4), &cfg, true).unwrap();
        let ci = det.inverted_ci.unwrap();
        assert_eq!(ci.points, INVERSION_POINTS);
        assert!(ci.accepted > 0);
        let th = det.tau_hat.unwrap();
        assert!(ci.lo.is_none_or(|l| l <= th) && ci.hi.is_none_or(|h| h >= th));
    }
}
