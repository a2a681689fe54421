//! Seeded data-generating processes and the replication driver.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::{select_bandwidths, BandwidthMethod};
use crate::error::{RdError, Result};
use crate::fuzzy::null_restricted_test;
use crate::laws::{ErrorLaw, LawFamily};
use crate::llr::{llr_inference, llr_mse_bandwidth};
use crate::sample::RdSample;
use crate::sharp::{
    estimate_kink, normal_quantile, sharp_inference, Bandwidths, InferenceConfig, InferenceResult,
};

const LEE_BELOW: [f64; 6] = [0.48, 1.27, 7.18, 20.21, 21.54, 7.33];
const LEE_ABOVE: [f64; 6] = [0.52, 0.84, -3.00, 7.99, -9.01, 3.56];
const LM_BELOW: [f64; 6] = [3.71, 2.30, 3.28, 1.45, 0.23, 0.03];
const LM_ABOVE: [f64; 6] = [0.26, 18.49, -54.81, 74.30, -45.02, 9.83];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanModel {
    Lee,
    Lm,
    /// Polynomial coefficients (constant first) below and above the cutoff.
    Custom {
        below: Vec<f64>,
        above: Vec<f64>,
    },
}

impl MeanModel {
    pub fn coefficients(&self) -> (&[f64], &[f64]) {
        match self {
            MeanModel::Lee => (&LEE_BELOW, &LEE_ABOVE),
            MeanModel::Lm => (&LM_BELOW, &LM_ABOVE),
            MeanModel::Custom { below, above } => (below, above),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (below, above) = self.coefficients();
        let c = if x >= 0.0 { above } else { below };
        c.iter().rev().fold(0.0, |acc, &b| acc * x + b)
    }

    /// Jump in the level at the cutoff.
    pub fn jump(&self) -> f64 {
        let (below, above) = self.coefficients();
        above.first().copied().unwrap_or(0.0) - below.first().copied().unwrap_or(0.0)
    }

    /// Jump in the first derivative at the cutoff.
    pub fn kink(&self) -> f64 {
        let (below, above) = self.coefficients();
        above.get(1).copied().unwrap_or(0.0) - below.get(1).copied().unwrap_or(0.0)
    }

    pub fn name(&self) -> &'static str {
        match self {
            MeanModel::Lee => "lee",
            MeanModel::Lm => "lm",
            MeanModel::Custom { .. } => "custom",
        }
    }
}

/// Side-dependent compliance probabilities and the effect of treatment on the outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuzzyOverlay {
    pub p_below: f64,
    pub p_above: f64,
}

impl Default for FuzzyOverlay {
    fn default() -> Self {
        FuzzyOverlay {
            p_below: 0.3,
            p_above: 0.8,
        }
    }
}

/// Heteroskedastic scale: `(2 + cos(2 pi x)) / 10` or the literal `2 + cos(2 pi x) / 10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeteroScale {
    #[default]
    Tenth,
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub mean_model: MeanModel,
    /// Error law index `1..=5`.
    pub law: usize,
    /// Keep the law's native scale instead of unit variance.
    pub raw_scale: bool,
    pub heteroskedastic: bool,
    #[serde(default)]
    pub hetero_scale: HeteroScale,
    pub n: usize,
    pub fuzzy: Option<FuzzyOverlay>,
}

impl DgpSpec {
    pub fn new(mean_model: MeanModel, law: usize, heteroskedastic: bool, n: usize) -> Self {
        DgpSpec {
            mean_model,
            law,
            raw_scale: false,
            heteroskedastic,
            hetero_scale: HeteroScale::Tenth,
            n,
            fuzzy: None,
        }
    }

    pub fn error_law(&self) -> Result<ErrorLaw> {
        let mut law = ErrorLaw::numbered(self.law)?;
        law.standardized = !self.raw_scale;
        Ok(law)
    }

    pub fn scale(&self, x: f64) -> f64 {
        let c = (2.0 * std::f64::consts::PI * x).cos();
        match (self.heteroskedastic, self.hetero_scale) {
            (true, HeteroScale::Tenth) => (2.0 + c) / 10.0,
            (true, HeteroScale::Literal) => 2.0 + c / 10.0,
            (false, _) => 0.5,
        }
    }

    /// Level effect for sharp designs, the ratio of jumps for fuzzy ones.
    pub fn true_effect(&self) -> f64 {
        match &self.fuzzy {
            None => self.mean_model.jump(),
            Some(f) => self.mean_model.jump() / (f.p_above - f.p_below),
        }
    }

    pub fn true_kink(&self) -> f64 {
        self.mean_model.kink()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(RdError::InvalidInput("n must be at least 2".into()));
        }
        let law = self.error_law()?;
        if let LawFamily::StudentT { df } = law.family {
            if law.standardized && df <= 2.0 {
                return Err(RdError::InvalidInput("t law needs df > 2".into()));
            }
        }
        if let Some(f) = &self.fuzzy {
            let ok = |p: f64| (0.0..=1.0).contains(&p);
            if !ok(f.p_below) || !ok(f.p_above) || f.p_above == f.p_below {
                return Err(RdError::InvalidInput(
                    "compliance probabilities must differ and lie in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Generator for replication `rep`: one stream per replication.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// One sample: `X = 2 Beta(2,4) - 1`, `Y = m(X) + sigma(X) e`; with a fuzzy
/// overlay `T ~ Bernoulli(p(X))` and `Y` gains `effect (T - p(X))`.
pub fn draw_sample<R: Rng + ?Sized>(spec: &DgpSpec, rng: &mut R) -> Result<RdSample> {
    spec.validate()?;
    let law = spec.error_law()?;
    let beta = Beta::new(2.0, 4.0).map_err(|e| RdError::InvalidInput(e.to_string()))?;
    let effect = spec.true_effect();
    let mut x = Vec::with_capacity(spec.n);
    let mut y = Vec::with_capacity(spec.n);
    let mut t = Vec::with_capacity(if spec.fuzzy.is_some() { spec.n } else { 0 });
    for _ in 0..spec.n {
        let xi = 2.0 * beta.sample(rng) - 1.0;
        let e = law.sample(rng);
        let mut yi = spec.mean_model.eval(xi) + spec.scale(xi) * e;
        if let Some(f) = &spec.fuzzy {
            let p = if xi >= 0.0 { f.p_above } else { f.p_below };
            let ti = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            yi += effect * (ti - p);
            t.push(ti);
        }
        x.push(xi);
        y.push(yi);
    }
    let s = RdSample::new(x, y, 0.0)?;
    if spec.fuzzy.is_some() {
        s.with_treatment(t)
    } else {
        Ok(s)
    }
}

/// Covariate designs with normal errors; model 1 has no covariate effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovariateModel {
    Model1,
    Model2,
    Model3,
    Model4,
}

const COV_Y_BELOW: [f64; 6] = [0.36, 0.96, 5.47, 15.28, 15.87, 5.14];
const COV_Y_ABOVE: [f64; 6] = [0.38, 0.62, -2.84, 8.42, -10.24, 4.31];
const COV_Z_BELOW: [f64; 6] = [0.49, 1.06, 5.74, 17.14, 19.75, 7.47];
const COV_Z_ABOVE: [f64; 6] = [0.49, 0.61, 0.23, -3.46, 6.43, -3.48];
const SIGMA_Y: f64 = 0.1295;
const SIGMA_Z: f64 = 0.1353;
const RHO: f64 = 0.2692;

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &b| acc * x + b)
}

impl CovariateModel {
    fn rho(self) -> f64 {
        match self {
            CovariateModel::Model1 | CovariateModel::Model3 => 0.0,
            CovariateModel::Model2 => RHO,
            CovariateModel::Model4 => 2.0 * RHO,
        }
    }

    /// Jump in `E[Y | X]` at the cutoff.
    pub fn truth(self) -> f64 {
        match self {
            CovariateModel::Model1 => MeanModel::Lee.jump(),
            _ => COV_Y_ABOVE[0] - COV_Y_BELOW[0] + 0.28 * COV_Z_ABOVE[0] - 0.22 * COV_Z_BELOW[0],
        }
    }

    /// Sample with one covariate column.
    pub fn draw<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Result<RdSample> {
        let beta = Beta::new(2.0, 4.0).map_err(|e| RdError::InvalidInput(e.to_string()))?;
        let rho = self.rho();
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        for _ in 0..n {
            let xi = 2.0 * beta.sample(rng) - 1.0;
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            let ey = SIGMA_Y * a;
            let ez = SIGMA_Z * (rho * a + (1.0 - rho * rho).sqrt() * b);
            let above = xi >= 0.0;
            let zi = poly(if above { &COV_Z_ABOVE } else { &COV_Z_BELOW }, xi) + ez;
            let yi = match self {
                CovariateModel::Model1 => MeanModel::Lee.eval(xi) + ey,
                _ => {
                    let (c, g) = if above {
                        (&COV_Y_ABOVE, 0.28)
                    } else {
                        (&COV_Y_BELOW, 0.22)
                    };
                    poly(c, xi) + g * zi + ey
                }
            };
            x.push(xi);
            y.push(yi);
            z.push(zi);
        }
        RdSample::new(x, y, 0.0)?.with_covariates(vec![z])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Uncorrected composite quantile estimate with the plain interval.
    Cqr,
    /// Bias-corrected estimate with the adjusted interval.
    CqrBc,
    Llr,
    Kink,
    /// Null-restricted fuzzy test at the true effect; coverage is one minus its size.
    FuzzyTest,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Cqr => "cqr",
            EstimatorKind::CqrBc => "cqr-bc",
            EstimatorKind::Llr => "llr",
            EstimatorKind::Kink => "kink",
            EstimatorKind::FuzzyTest => "fuzzy-test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "cqr" => Ok(EstimatorKind::Cqr),
            "cqr-bc" => Ok(EstimatorKind::CqrBc),
            "llr" => Ok(EstimatorKind::Llr),
            "kink" => Ok(EstimatorKind::Kink),
            "fuzzy-test" => Ok(EstimatorKind::FuzzyTest),
            other => Err(RdError::InvalidInput(format!(
                "unknown estimator '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    Selected(BandwidthMethod),
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub estimators: Vec<EstimatorKind>,
    pub bandwidth: BandwidthRule,
    pub kink_bandwidth: f64,
    pub inference: InferenceConfig,
    pub reps: usize,
    pub seed: u64,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            estimators: vec![EstimatorKind::Cqr, EstimatorKind::CqrBc],
            bandwidth: BandwidthRule::Selected(BandwidthMethod::AdjMseEqual),
            kink_bandwidth: 0.3,
            inference: InferenceConfig::default(),
            reps: 1000,
            seed: 42,
            threads: None,
        }
    }
}

/// Outcome of one estimator in one replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepOutcome {
    pub point: f64,
    pub se: f64,
    pub covered_plain: bool,
    pub covered_adjusted: bool,
    pub se_plain: f64,
    pub se_adjusted: f64,
    pub bandwidth: f64,
}

fn outcome(r: &InferenceResult, truth: f64, corrected: bool) -> RepOutcome {
    RepOutcome {
        point: if corrected { r.point_bc } else { r.point },
        se: if corrected { r.se_adjusted } else { r.se_plain },
        covered_plain: r.ci_plain.contains(truth),
        covered_adjusted: r.ci_adjusted.contains(truth),
        se_plain: r.se_plain,
        se_adjusted: r.se_adjusted,
        bandwidth: 0.5 * (r.bandwidths.h_plus + r.bandwidths.h_minus),
    }
}

/// All requested estimators on one sample.
pub fn run_replication(
    sample: &RdSample,
    spec: &DgpSpec,
    cfg: &StudyConfig,
) -> Vec<std::result::Result<RepOutcome, RdError>> {
    let truth = spec.true_effect();
    let inf = &cfg.inference;
    let needs_bw = cfg.estimators.iter().any(|e| {
        matches!(
            e,
            EstimatorKind::Cqr | EstimatorKind::CqrBc | EstimatorKind::FuzzyTest
        )
    });
    let bw = needs_bw.then(|| match cfg.bandwidth {
        BandwidthRule::Fixed(h) => Ok(Bandwidths::equal(h)),
        BandwidthRule::Selected(m) => select_bandwidths(sample, inf.q, &inf.kernel, m)
            .map(|b| Bandwidths::new(b.h_plus, b.h_minus)),
    });
    let needs_cqr = cfg
        .estimators
        .iter()
        .any(|e| matches!(e, EstimatorKind::Cqr | EstimatorKind::CqrBc));
    let sharp = needs_cqr.then(|| {
        bw.clone()
            .expect("computed")
            .and_then(|bw| sharp_inference(sample, &bw, inf))
    });
    cfg.estimators
        .iter()
        .map(|e| match e {
            EstimatorKind::Cqr => sharp
                .as_ref()
                .expect("computed")
                .as_ref()
                .map(|r| outcome(r, truth, false))
                .map_err(Clone::clone),
            EstimatorKind::CqrBc => sharp
                .as_ref()
                .expect("computed")
                .as_ref()
                .map(|r| outcome(r, truth, true))
                .map_err(Clone::clone),
            EstimatorKind::Llr => {
                let h = match cfg.bandwidth {
                    BandwidthRule::Fixed(h) => Ok(h),
                    BandwidthRule::Selected(_) => llr_mse_bandwidth(sample, inf),
                };
                h.and_then(|h| llr_inference(sample, &Bandwidths::equal(h), inf))
                    .map(|r| outcome(&r, truth, false))
            }
            EstimatorKind::Kink => estimate_kink(sample, cfg.kink_bandwidth, inf)
                .map(|r| outcome(&r, spec.true_kink(), false)),
            EstimatorKind::FuzzyTest => bw.clone().expect("computed").and_then(|bw| {
                let c = InferenceConfig {
                    tau0: truth,
                    ..inf.clone()
                };
                let (r, det) = null_restricted_test(sample, &bw, &c, false)?;
                let tau_hat = det
                    .tau_hat
                    .ok_or(RdError::WeakIdentification(det.denominator.abs()))?;
                let z = normal_quantile(c.level)?;
                Ok(RepOutcome {
                    point: tau_hat,
                    se: r.se_adjusted,
                    covered_plain: r.t_plain.abs() <= z,
                    covered_adjusted: r.t_adjusted.abs() <= z,
                    se_plain: r.se_plain,
                    se_adjusted: r.se_adjusted,
                    bandwidth: 0.5 * (bw.h_plus + bw.h_minus),
                })
            }),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub estimator: String,
    pub model: String,
    pub law: usize,
    pub heteroskedastic: bool,
    pub n: usize,
    pub truth: f64,
    pub replications: usize,
    pub failures: usize,
    /// Failures exceeded five percent of replications.
    pub failure_flag: bool,
    pub mean_point: Option<f64>,
    pub mc_sd: Option<f64>,
    pub mean_estimated_se: Option<f64>,
    pub mean_adjusted_se: Option<f64>,
    pub coverage_plain: Option<f64>,
    pub coverage_adjusted: Option<f64>,
    /// `|mean point - truth|`.
    pub mean_abs_bias: Option<f64>,
    pub rmse: Option<f64>,
    pub mean_bandwidth: Option<f64>,
    pub seed: u64,
    #[serde(skip)]
    pub runtime_secs: f64,
}

pub fn summarize(
    name: &str,
    spec: &DgpSpec,
    truth: f64,
    seed: u64,
    outcomes: &[std::result::Result<RepOutcome, RdError>],
) -> McSummary {
    let ok: Vec<&RepOutcome> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let m = ok.len();
    let failures = outcomes.len() - m;
    let avg = |f: &dyn Fn(&RepOutcome) -> f64| -> Option<f64> {
        if m == 0 {
            None
        } else {
            Some(ok.iter().map(|o| f(o)).sum::<f64>() / m as f64)
        }
    };
    let mean_point = avg(&|o| o.point);
    let mc_sd = if m >= 2 {
        let mu = mean_point.unwrap_or(0.0);
        Some((ok.iter().map(|o| (o.point - mu).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt())
    } else {
        None
    };
    McSummary {
        estimator: name.into(),
        model: spec.mean_model.name().into(),
        law: spec.law,
        heteroskedastic: spec.heteroskedastic,
        n: spec.n,
        truth,
        replications: outcomes.len(),
        failures,
        failure_flag: failures * 20 > outcomes.len(),
        mean_point,
        mc_sd,
        mean_estimated_se: avg(&|o| o.se),
        mean_adjusted_se: avg(&|o| o.se_adjusted),
        coverage_plain: avg(&|o| if o.covered_plain { 1.0 } else { 0.0 }),
        coverage_adjusted: avg(&|o| if o.covered_adjusted { 1.0 } else { 0.0 }),
        mean_abs_bias: mean_point.map(|p| (p - truth).abs()),
        rmse: avg(&|o| (o.point - truth).powi(2)).map(f64::sqrt),
        mean_bandwidth: avg(&|o| o.bandwidth),
        seed,
        runtime_secs: 0.0,
    }
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| RdError::InvalidInput(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs `cfg.reps` replications and aggregates per estimator, in replication order.
pub fn run_study(spec: &DgpSpec, cfg: &StudyConfig) -> Result<Vec<McSummary>> {
    spec.validate()?;
    if cfg.reps == 0 {
        return Err(RdError::InvalidInput("reps must be at least 1".into()));
    }
    if cfg.estimators.is_empty() {
        return Err(RdError::InvalidInput("no estimators requested".into()));
    }
    let start = Instant::now();
    let per_rep: Vec<Vec<std::result::Result<RepOutcome, RdError>>> =
        with_pool(cfg.threads, || {
            (0..cfg.reps)
                .into_par_iter()
                .map(|rep| {
                    let mut rng = replication_rng(cfg.seed, rep as u64);
                    match draw_sample(spec, &mut rng) {
                        Ok(s) => run_replication(&s, spec, cfg),
                        Err(e) => vec![Err(e); cfg.estimators.len()],
                    }
                })
                .collect()
        })?;
    let elapsed = start.elapsed().as_secs_f64();
    Ok(cfg
        .estimators
        .iter()
        .enumerate()
        .map(|(j, e)| {
            let col: Vec<_> = per_rep.iter().map(|r| r[j].clone()).collect();
            let truth = if *e == EstimatorKind::Kink {
                spec.true_kink()
            } else {
                spec.true_effect()
            };
            let mut s = summarize(e.name(), spec, truth, cfg.seed, &col);
            s.runtime_secs = elapsed;
            s
        })
        .collect())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// CSV with a fixed column order and fixed precision.
pub fn summaries_to_csv(rows: &[McSummary]) -> String {
    let mut out = String::from(
        "estimator,model,law,heteroskedastic,n,truth,replications,failures,failure_flag,mean_point,mc_sd,mean_estimated_se,mean_adjusted_se,coverage_plain,coverage_adjusted,mean_abs_bias,rmse,mean_bandwidth,seed\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.estimator,
            r.model,
            r.law,
            r.heteroskedastic,
            r.n,
            r.truth,
            r.replications,
            r.failures,
            r.failure_flag,
            fmt_opt(r.mean_point),
            fmt_opt(r.mc_sd),
            fmt_opt(r.mean_estimated_se),
            fmt_opt(r.mean_adjusted_se),
            fmt_opt(r.coverage_plain),
            fmt_opt(r.coverage_adjusted),
            fmt_opt(r.mean_abs_bias),
            fmt_opt(r.rmse),
            fmt_opt(r.mean_bandwidth),
            r.seed
        ));
    }
    out
}
