//! CSV ingestion, job configuration, command dispatch and output formatting.

use std::io::Read;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::are::are_table;
use crate::bandwidth::{fit_quartic, select_bandwidths, BandwidthMethod, BandwidthResult};
use crate::error::{RdError, Result};
use crate::fuzzy::{null_restricted_test, FuzzyDetails};
use crate::kernels::{KernelFamily, KernelSpec, Side};
use crate::laws::ErrorLaw;
use crate::lcqr::fit_boundary_with_covariates;
use crate::llr::{llr_inference, llr_mse_bandwidth};
use crate::montecarlo::{
    run_study, summaries_to_csv, BandwidthRule, DgpSpec, EstimatorKind, HeteroScale, McSummary,
    MeanModel, StudyConfig,
};
use crate::sample::RdSample;
use crate::sandwich::SandwichMode;
use crate::sharp::{
    estimate_kink, normal_quantile, sharp_inference, two_sided_p, Bandwidths, InferenceConfig,
    InferenceResult, Interval,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Bins per side in the binned-means plot data.
pub const PLOT_BINS: usize = 50;

/// Bandwidth sweep `0.05, 0.075, ..., 1.0`.
pub fn sweep_bandwidths() -> Vec<f64> {
    (0..39).map(|i| (50 + 25 * i) as f64 / 1000.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    #[default]
    Estimate,
    Bandwidth,
    Are,
    Simulate,
    Plotdata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    #[default]
    Sharp,
    Fuzzy,
    Kink,
}

impl FromStr for Design {
    type Err = RdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sharp" => Ok(Design::Sharp),
            "fuzzy" => Ok(Design::Fuzzy),
            "kink" => Ok(Design::Kink),
            other => Err(RdError::InvalidInput(format!("unknown design `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    #[default]
    Lcqr,
    Llr,
}

impl FromStr for EstimatorChoice {
    type Err = RdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lcqr" => Ok(EstimatorChoice::Lcqr),
            "llr" => Ok(EstimatorChoice::Llr),
            other => Err(RdError::InvalidInput(format!(
                "unknown estimator `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
    Md,
}

impl FromStr for OutputFormat {
    type Err = RdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(OutputFormat::Json),
            "csv" => Ok(OutputFormat::Csv),
            "md" | "markdown" => Ok(OutputFormat::Md),
            other => Err(RdError::InvalidInput(format!("unknown format `{other}`"))),
        }
    }
}

pub fn parse_mode(s: &str) -> Result<SandwichMode> {
    match s {
        "asymptotic" => Ok(SandwichMode::Asymptotic),
        "fixed-n" | "fixed_n" => Ok(SandwichMode::FixedN),
        other => Err(RdError::InvalidInput(format!("unknown mode `{other}`"))),
    }
}

/// `auto` (adjusted MSE), `rot` (rule of thumb) or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BandwidthChoice {
    #[default]
    Auto,
    Rot,
    Fixed(f64),
}

impl FromStr for BandwidthChoice {
    type Err = RdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(BandwidthChoice::Auto),
            "rot" => Ok(BandwidthChoice::Rot),
            v => match v.parse::<f64>() {
                Ok(h) if h > 0.0 && h.is_finite() => Ok(BandwidthChoice::Fixed(h)),
                _ => Err(RdError::InvalidInput(format!(
                    "bandwidth must be `auto`, `rot` or a positive number, got `{v}`"
                ))),
            },
        }
    }
}

impl TryFrom<String> for BandwidthChoice {
    type Error = RdError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BandwidthChoice> for String {
    fn from(b: BandwidthChoice) -> String {
        match b {
            BandwidthChoice::Auto => "auto".into(),
            BandwidthChoice::Rot => "rot".into(),
            BandwidthChoice::Fixed(h) => format!("{h}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub x: String,
    pub y: String,
    pub t: Option<String>,
    pub z: Vec<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            x: "x".into(),
            y: "y".into(),
            t: None,
            z: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateOptions {
    pub model: MeanModel,
    pub dgp: usize,
    pub hetero: bool,
    /// Use the literal `2 + cos(2 pi x) / 10` heteroskedastic scale.
    pub literal_hetero: bool,
    pub n: usize,
    pub reps: usize,
    pub estimators: Vec<EstimatorKind>,
    pub raw_scale: bool,
    pub fuzzy: bool,
    pub kink_bandwidth: f64,
    pub threads: Option<usize>,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        SimulateOptions {
            model: MeanModel::Lee,
            dgp: 1,
            hetero: false,
            literal_hetero: false,
            n: 500,
            reps: 5000,
            estimators: vec![EstimatorKind::Cqr, EstimatorKind::CqrBc, EstimatorKind::Llr],
            raw_scale: false,
            fuzzy: false,
            kink_bandwidth: 0.3,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AreOptions {
    pub laws: Vec<usize>,
    pub qs: Vec<usize>,
}

impl Default for AreOptions {
    fn default() -> Self {
        AreOptions {
            laws: vec![1, 2, 3, 4, 5],
            qs: vec![1, 5, 9, 19, 99],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JobConfig {
    pub command: Command,
    pub design: Design,
    pub estimator: EstimatorChoice,
    pub input: Option<PathBuf>,
    pub columns: ColumnMapping,
    pub cutoff: f64,
    pub q: usize,
    pub kernel: KernelFamily,
    pub bandwidth: BandwidthChoice,
    pub equal_bandwidth: bool,
    pub mode: SandwichMode,
    pub level: f64,
    pub tau0: f64,
    pub invert_ci: bool,
    pub seed: u64,
    pub format: OutputFormat,
    pub simulate: SimulateOptions,
    pub are: AreOptions,
}

impl Default for JobConfig {
    fn default() -> Self {
        JobConfig {
            command: Command::Estimate,
            design: Design::Sharp,
            estimator: EstimatorChoice::Lcqr,
            input: None,
            columns: ColumnMapping::default(),
            cutoff: 0.0,
            q: 7,
            kernel: KernelFamily::Triangular,
            bandwidth: BandwidthChoice::Auto,
            equal_bandwidth: false,
            mode: SandwichMode::Asymptotic,
            level: 0.95,
            tau0: 0.0,
            invert_ci: false,
            seed: 42,
            format: OutputFormat::Json,
            simulate: SimulateOptions::default(),
            are: AreOptions::default(),
        }
    }
}

impl JobConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(RdError::InvalidInput("q must be at least 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(RdError::InvalidInput("level must lie in (0, 1)".into()));
        }
        if !self.cutoff.is_finite() || !self.tau0.is_finite() {
            return Err(RdError::InvalidInput(
                "cutoff and tau0 must be finite".into(),
            ));
        }
        let needs_data = matches!(
            self.command,
            Command::Estimate | Command::Bandwidth | Command::Plotdata
        );
        if needs_data && self.input.is_none() {
            return Err(RdError::InvalidInput("an input file is required".into()));
        }
        if needs_data && self.design == Design::Fuzzy && self.columns.t.is_none() {
            return Err(RdError::MissingColumn("t".into()));
        }
        if self.design == Design::Fuzzy && self.estimator == EstimatorChoice::Llr {
            return Err(RdError::InvalidInput(
                "the local linear baseline supports sharp designs only".into(),
            ));
        }
        Ok(())
    }

    pub fn kernel_spec(&self) -> KernelSpec {
        KernelSpec::new(self.kernel)
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            q: self.q,
            kernel: self.kernel_spec(),
            mode: self.mode,
            level: self.level,
            tau0: self.tau0,
            ..Default::default()
        }
    }

    fn adj_method(&self) -> BandwidthMethod {
        if self.equal_bandwidth {
            BandwidthMethod::AdjMseEqual
        } else {
            BandwidthMethod::AdjMseTwo
        }
    }
}

/// A loaded sample with the running variable centered at the cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    pub sample: RdSample,
    /// File line numbers (header is line 1) of rows dropped for missing or non-finite values.
    pub dropped_rows: Vec<usize>,
    pub cutoff: f64,
}

fn is_missing(s: &str) -> bool {
    matches!(s, "" | "NA" | "na" | "NaN" | "nan" | "." | "null")
}

/// Reads CSV from any reader; see [`load_csv`].
pub fn read_csv<R: Read>(reader: R, mapping: &ColumnMapping, cutoff: f64) -> Result<LoadedSample> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| RdError::Parse {
            row: 1,
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| RdError::MissingColumn(name.to_string()))
    };
    let ix = col(&mapping.x)?;
    let iy = col(&mapping.y)?;
    let it = mapping.t.as_deref().map(col).transpose()?;
    let iz: Vec<usize> = mapping.z.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let (mut x, mut y, mut t) = (Vec::new(), Vec::new(), Vec::new());
    let mut z: Vec<Vec<f64>> = vec![Vec::new(); iz.len()];
    let mut dropped = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| RdError::Parse {
            row: line,
            msg: e.to_string(),
        })?;
        let field = |j: usize, name: &str| -> Result<Option<f64>> {
            let s = rec.get(j).unwrap_or("");
            if is_missing(s) {
                return Ok(None);
            }
            let v: f64 = s.parse().map_err(|_| RdError::Parse {
                row: line,
                msg: format!("column `{name}`: cannot parse `{s}` as a number"),
            })?;
            Ok(v.is_finite().then_some(v))
        };
        let xv = field(ix, &mapping.x)?;
        let yv = field(iy, &mapping.y)?;
        let tv = match (it, &mapping.t) {
            (Some(j), Some(name)) => Some(field(j, name)?),
            _ => None,
        };
        let zv: Vec<Option<f64>> = iz
            .iter()
            .zip(&mapping.z)
            .map(|(&j, name)| field(j, name))
            .collect::<Result<_>>()?;
        let complete = xv.is_some()
            && yv.is_some()
            && tv.is_none_or(|v| v.is_some())
            && zv.iter().all(Option::is_some);
        if !complete {
            dropped.push(line);
            continue;
        }
        if let Some(Some(tt)) = tv {
            if tt != 0.0 && tt != 1.0 {
                return Err(RdError::Parse {
                    row: line,
                    msg: format!("treatment must be 0 or 1, got {tt}"),
                });
            }
            t.push(tt);
        }
        x.push(xv.unwrap_or_default() - cutoff);
        y.push(yv.unwrap_or_default());
        for (col, v) in z.iter_mut().zip(zv) {
            col.push(v.unwrap_or_default());
        }
    }
    if x.is_empty() {
        return Err(RdError::EmptyAfterFiltering);
    }
    let mut sample = RdSample::new(x, y, 0.0)?;
    if mapping.t.is_some() {
        sample = sample.with_treatment(t)?;
    }
    if !iz.is_empty() {
        sample = sample.with_covariates(z)?;
    }
    Ok(LoadedSample {
        sample,
        dropped_rows: dropped,
        cutoff,
    })
}

/// Loads the mapped columns; the returned running variable is `x - cutoff`.
pub fn load_csv(
    path: &std::path::Path,
    mapping: &ColumnMapping,
    cutoff: f64,
) -> Result<LoadedSample> {
    let file =
        std::fs::File::open(path).map_err(|e| RdError::Io(format!("{}: {e}", path.display())))?;
    read_csv(file, mapping, cutoff)
}

/// JSON formatter writing every float with 17 significant digits.
struct Sig17;

impl serde_json::ser::Formatter for Sig17 {
    fn write_f64<W: ?Sized + std::io::Write>(
        &mut self,
        writer: &mut W,
        value: f64,
    ) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + std::io::Write>(
        &mut self,
        writer: &mut W,
        value: f32,
    ) -> std::io::Result<()> {
        write!(writer, "{:.16e}", value as f64)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17);
    value
        .serialize(&mut ser)
        .map_err(|e| RdError::Io(format!("json: {e}")))?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| RdError::Io(e.to_string()))
}

/// Machine-readable error record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub schema: u32,
    pub code: String,
    pub message: String,
    pub exit_code: i32,
}

impl From<&RdError> for ErrorReport {
    fn from(e: &RdError) -> Self {
        ErrorReport {
            schema: SCHEMA_VERSION,
            code: e.code().into(),
            message: e.to_string(),
            exit_code: e.exit_code(),
        }
    }
}

/// Ad hoc inference for the covariate-adjusted estimate: the bias and
/// adjusted s.e. of the unadjusted estimate are reused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateReport {
    pub tau_tilde: f64,
    pub covariate_coefs: Vec<f64>,
    pub dropped_covariates: Vec<usize>,
    pub bandwidth: f64,
    pub bias_hat: f64,
    pub se_adjusted: f64,
    pub t_adjusted: f64,
    pub p_value_adjusted: f64,
    pub ci_adjusted: Interval,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub schema: u32,
    pub command: Command,
    pub design: Design,
    pub estimator: EstimatorChoice,
    pub n: usize,
    pub n_plus: usize,
    pub n_minus: usize,
    pub cutoff: f64,
    pub dropped_rows: Vec<usize>,
    pub bandwidth_selection: Option<BandwidthResult>,
    pub result: InferenceResult,
    pub fuzzy: Option<FuzzyDetails>,
    pub covariate_adjusted: Option<CovariateReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    pub schema: u32,
    pub command: Command,
    pub n_plus: usize,
    pub n_minus: usize,
    pub result: BandwidthResult,
    /// Common local linear MSE bandwidth, when requested.
    pub llr_bandwidth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub schema: u32,
    pub command: Command,
    pub spec: DgpSpec,
    pub reps: usize,
    pub seed: u64,
    pub rows: Vec<McSummary>,
}

/// Named output file contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

/// What a job produces: a primary document plus, for `plotdata`, extra files.
#[derive(Debug, Clone, PartialEq)]
pub struct JobOutput {
    pub primary: String,
    pub artifacts: Vec<Artifact>,
}

fn resolve_bandwidths(
    sample: &RdSample,
    cfg: &JobConfig,
) -> Result<(Bandwidths, Option<BandwidthResult>)> {
    let kernel = cfg.kernel_spec();
    match cfg.bandwidth {
        BandwidthChoice::Fixed(h) => Ok((Bandwidths::equal(h), None)),
        BandwidthChoice::Rot => {
            let r = select_bandwidths(sample, cfg.q, &kernel, BandwidthMethod::Rot)?;
            let bw = if cfg.equal_bandwidth {
                Bandwidths::equal(0.5 * (r.h_plus + r.h_minus))
            } else {
                Bandwidths::new(r.h_plus, r.h_minus)
            };
            Ok((bw, Some(r)))
        }
        BandwidthChoice::Auto => {
            let r = select_bandwidths(sample, cfg.q, &kernel, cfg.adj_method())?;
            Ok((Bandwidths::new(r.h_plus, r.h_minus), Some(r)))
        }
    }
}

fn covariate_report(
    sample: &RdSample,
    bw: &Bandwidths,
    res: &InferenceResult,
    cfg: &JobConfig,
) -> Result<CovariateReport> {
    let icfg = cfg.inference_config();
    let h = 0.5 * (bw.h_plus + bw.h_minus);
    let fit = fit_boundary_with_covariates(sample, cfg.q, h, &icfg.kernel, &icfg.solver)?;
    let z = normal_quantile(cfg.level)?;
    let centered = fit.treatment_coef - res.bias_hat;
    let t = (centered - cfg.tau0) / res.se_adjusted;
    Ok(CovariateReport {
        tau_tilde: fit.treatment_coef,
        covariate_coefs: fit.covariate_coefs,
        dropped_covariates: fit.dropped,
        bandwidth: h,
        bias_hat: res.bias_hat,
        se_adjusted: res.se_adjusted,
        t_adjusted: t,
        p_value_adjusted: two_sided_p(t),
        ci_adjusted: Interval::centered(centered, z * res.se_adjusted),
        converged: fit.converged,
    })
}

pub fn estimate(loaded: &LoadedSample, cfg: &JobConfig) -> Result<EstimateReport> {
    let sample = &loaded.sample;
    let icfg = cfg.inference_config();
    let mut fuzzy = None;
    let mut covariate = None;
    let (result, selection) = match (cfg.design, cfg.estimator) {
        (Design::Sharp, EstimatorChoice::Lcqr) => {
            let (bw, sel) = resolve_bandwidths(sample, cfg)?;
            let res = sharp_inference(sample, &bw, &icfg)?;
            if sample.z.is_some() {
                covariate = Some(covariate_report(sample, &bw, &res, cfg)?);
            }
            (res, sel)
        }
        (Design::Sharp, EstimatorChoice::Llr) => {
            let (bw, sel) = match cfg.bandwidth {
                BandwidthChoice::Auto => {
                    (Bandwidths::equal(llr_mse_bandwidth(sample, &icfg)?), None)
                }
                _ => resolve_bandwidths(sample, cfg)?,
            };
            (llr_inference(sample, &bw, &icfg)?, sel)
        }
        (Design::Fuzzy, _) => {
            let (bw, sel) = resolve_bandwidths(sample, cfg)?;
            let (res, det) = null_restricted_test(sample, &bw, &icfg, cfg.invert_ci)?;
            fuzzy = Some(det);
            (res, sel)
        }
        (Design::Kink, _) => {
            let (bw, sel) = resolve_bandwidths(sample, cfg)?;
            let h = 0.5 * (bw.h_plus + bw.h_minus);
            let mut res = estimate_kink(sample, h, &icfg)?;
            if bw.h_plus != bw.h_minus {
                res.notes
                    .push("common bandwidth is the mean of the two selected bandwidths".into());
            }
            (res, sel)
        }
    };
    Ok(EstimateReport {
        schema: SCHEMA_VERSION,
        command: Command::Estimate,
        design: cfg.design,
        estimator: cfg.estimator,
        n: sample.len(),
        n_plus: sample.n_side(Side::Above),
        n_minus: sample.n_side(Side::Below),
        cutoff: loaded.cutoff,
        dropped_rows: loaded.dropped_rows.clone(),
        bandwidth_selection: selection,
        result,
        fuzzy,
        covariate_adjusted: covariate,
    })
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

fn opt6(v: Option<f64>) -> String {
    v.map(f6).unwrap_or_default()
}

impl EstimateReport {
    fn fields(&self) -> Vec<(&'static str, String)> {
        let r = &self.result;
        let mut out = vec![
            ("design", format!("{:?}", self.design).to_lowercase()),
            ("estimator", format!("{:?}", self.estimator).to_lowercase()),
            ("n", self.n.to_string()),
            ("point", f6(r.point)),
            ("bias_hat", f6(r.bias_hat)),
            ("point_bc", f6(r.point_bc)),
            ("se_plain", f6(r.se_plain)),
            ("se_adjusted", f6(r.se_adjusted)),
            ("t_adjusted", f6(r.t_adjusted)),
            ("p_value_adjusted", f6(r.p_value_adjusted)),
            ("ci_plain_lo", f6(r.ci_plain.lo)),
            ("ci_plain_hi", f6(r.ci_plain.hi)),
            ("ci_adjusted_lo", f6(r.ci_adjusted.lo)),
            ("ci_adjusted_hi", f6(r.ci_adjusted.hi)),
            ("h_plus", f6(r.bandwidths.h_plus)),
            ("h_minus", f6(r.bandwidths.h_minus)),
        ];
        if let Some(f) = &self.fuzzy {
            out.push(("tau_hat", opt6(f.tau_hat)));
            out.push(("denominator", f6(f.denominator)));
            if let Some(ci) = &f.inverted_ci {
                out.push(("inverted_ci_lo", opt6(ci.lo)));
                out.push(("inverted_ci_hi", opt6(ci.hi)));
            }
        }
        if let Some(c) = &self.covariate_adjusted {
            out.push(("tau_tilde", f6(c.tau_tilde)));
            out.push(("tau_tilde_ci_lo", f6(c.ci_adjusted.lo)));
            out.push(("tau_tilde_ci_hi", f6(c.ci_adjusted.hi)));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let f = self.fields();
        let head: Vec<&str> = f.iter().map(|(k, _)| *k).collect();
        let vals: Vec<&str> = f.iter().map(|(_, v)| v.as_str()).collect();
        format!("{}\n{}\n", head.join(","), vals.join(","))
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| field | value |\n|---|---|\n");
        for (k, v) in self.fields() {
            out.push_str(&format!("| {k} | {v} |\n"));
        }
        for n in &self.result.notes {
            out.push_str(&format!("\n> {n}\n"));
        }
        out
    }
}

impl BandwidthReport {
    fn fields(&self) -> Vec<(&'static str, String)> {
        let r = &self.result;
        vec![
            ("method", format!("{:?}", r.method)),
            ("h_plus", f6(r.h_plus)),
            ("h_minus", f6(r.h_minus)),
            ("c2_plus", opt6(r.c2_plus)),
            ("c2_minus", opt6(r.c2_minus)),
            ("c3_plus", opt6(r.c3_plus)),
            ("c3_minus", opt6(r.c3_minus)),
            ("degenerate_curvature", r.degenerate_curvature.to_string()),
            ("llr_bandwidth", opt6(self.llr_bandwidth)),
        ]
    }
}

fn render_fields(fields: Vec<(&'static str, String)>, format: OutputFormat) -> String {
    match format {
        OutputFormat::Csv => {
            let head: Vec<&str> = fields.iter().map(|(k, _)| *k).collect();
            let vals: Vec<&str> = fields.iter().map(|(_, v)| v.as_str()).collect();
            format!("{}\n{}\n", head.join(","), vals.join(","))
        }
        _ => {
            let mut out = String::from("| field | value |\n|---|---|\n");
            for (k, v) in fields {
                out.push_str(&format!("| {k} | {v} |\n"));
            }
            out
        }
    }
}

pub fn summaries_to_markdown(rows: &[McSummary]) -> String {
    let mut out = String::from(
        "| estimator | truth | reps | failures | mean | mc sd | mean s.e. | mean adj. s.e. | cov. plain | cov. adj. | rmse |\n|---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.estimator,
            f6(r.truth),
            r.replications,
            r.failures,
            opt6(r.mean_point),
            opt6(r.mc_sd),
            opt6(r.mean_estimated_se),
            opt6(r.mean_adjusted_se),
            opt6(r.coverage_plain),
            opt6(r.coverage_adjusted),
            opt6(r.rmse),
        ));
    }
    out
}

pub fn simulate(cfg: &JobConfig) -> Result<SimulateReport> {
    let o = &cfg.simulate;
    let spec = DgpSpec {
        mean_model: o.model.clone(),
        law: o.dgp,
        raw_scale: o.raw_scale,
        heteroskedastic: o.hetero,
        hetero_scale: if o.literal_hetero {
            HeteroScale::Literal
        } else {
            HeteroScale::Tenth
        },
        n: o.n,
        fuzzy: o.fuzzy.then(Default::default),
    };
    let bandwidth = match cfg.bandwidth {
        BandwidthChoice::Fixed(h) => BandwidthRule::Fixed(h),
        BandwidthChoice::Rot => BandwidthRule::Selected(BandwidthMethod::Rot),
        BandwidthChoice::Auto => BandwidthRule::Selected(cfg.adj_method()),
    };
    let study = StudyConfig {
        estimators: o.estimators.clone(),
        bandwidth,
        kink_bandwidth: o.kink_bandwidth,
        inference: cfg.inference_config(),
        reps: o.reps,
        seed: cfg.seed,
        threads: o.threads,
    };
    let rows = run_study(&spec, &study)?;
    Ok(SimulateReport {
        schema: SCHEMA_VERSION,
        command: Command::Simulate,
        spec,
        reps: o.reps,
        seed: cfg.seed,
        rows,
    })
}

/// Binned means per side; `x` in original units.
pub fn binned_means(loaded: &LoadedSample, bins: usize) -> String {
    let mut out = String::from("side,bin,lo,hi,center,n,mean_y\n");
    for side in [Side::Below, Side::Above] {
        let d = loaded.sample.side(side);
        if d.is_empty() {
            continue;
        }
        let (lo, hi) = match side {
            Side::Below => (d.x.iter().cloned().fold(f64::INFINITY, f64::min), 0.0),
            Side::Above => (0.0, d.x.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
        };
        let width = (hi - lo) / bins as f64;
        let mut sum = vec![0.0; bins];
        let mut cnt = vec![0usize; bins];
        for (&x, &y) in d.x.iter().zip(&d.y) {
            let b = if width > 0.0 {
                (((x - lo) / width).floor() as usize).min(bins - 1)
            } else {
                0
            };
            sum[b] += y;
            cnt[b] += 1;
        }
        for b in 0..bins {
            let a = lo + width * b as f64 + loaded.cutoff;
            let e = a + width;
            let mean = if cnt[b] > 0 {
                format!("{:.17e}", sum[b] / cnt[b] as f64)
            } else {
                String::new()
            };
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{},{}\n",
                side.name(),
                b,
                a,
                e,
                0.5 * (a + e),
                cnt[b],
                mean
            ));
        }
    }
    out
}

/// Global quartic fit per side evaluated on a grid.
pub fn fitted_curves(loaded: &LoadedSample, points: usize) -> Result<String> {
    let mut out = String::from("side,x,fitted\n");
    for side in [Side::Below, Side::Above] {
        let d = loaded.sample.side(side);
        let fit = fit_quartic(&d.x, &d.y, side)?;
        let lo = d.x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = d.x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for i in 0..points {
            let x = lo + (hi - lo) * i as f64 / (points - 1).max(1) as f64;
            let v = fit.coef.iter().rev().fold(0.0, |acc, &c| acc * x + c);
            out.push_str(&format!(
                "{},{:.6},{:.6}\n",
                side.name(),
                x + loaded.cutoff,
                v
            ));
        }
    }
    Ok(out)
}

/// LCQR and local linear estimates with `± 2` plain s.e. over the sweep.
pub fn bandwidth_sweep(loaded: &LoadedSample, cfg: &JobConfig) -> Result<String> {
    let icfg = cfg.inference_config();
    let mut lcqr_rows = String::new();
    let mut llr_rows = String::new();
    let row = |name: &str, h: f64, r: &Result<InferenceResult>, ratio: Option<f64>| -> String {
        match r {
            Ok(r) => format!(
                "{name},{h:.3},{:.6},{:.6},{:.6},{:.6},{},ok\n",
                r.point,
                r.se_plain,
                r.point - 2.0 * r.se_plain,
                r.point + 2.0 * r.se_plain,
                opt6(ratio)
            ),
            Err(e) => format!("{name},{h:.3},,,,,,{}\n", e.code()),
        }
    };
    for h in sweep_bandwidths() {
        let bw = Bandwidths::equal(h);
        let a = sharp_inference(&loaded.sample, &bw, &icfg);
        let b = llr_inference(&loaded.sample, &bw, &icfg);
        let ratio = match (&a, &b) {
            (Ok(a), Ok(b)) => Some(a.se_plain / b.se_plain),
            _ => None,
        };
        lcqr_rows.push_str(&row("lcqr", h, &a, ratio));
        llr_rows.push_str(&row("llr", h, &b, ratio));
    }
    Ok(format!(
        "estimator,h,estimate,se,lower,upper,se_ratio,status\n{lcqr_rows}{llr_rows}"
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotdataReport {
    pub schema: u32,
    pub command: Command,
    pub files: Vec<String>,
    pub bins_per_side: usize,
    pub sweep_rows_per_estimator: usize,
}

/// Runs a validated job and returns everything it emits.
pub fn run_job(cfg: &JobConfig) -> Result<JobOutput> {
    cfg.validate()?;
    let load = || {
        load_csv(
            cfg.input.as_ref().expect("validated"),
            &cfg.columns,
            cfg.cutoff,
        )
    };
    let primary = match cfg.command {
        Command::Estimate => {
            let rep = estimate(&load()?, cfg)?;
            match cfg.format {
                OutputFormat::Json => to_json(&rep)?,
                OutputFormat::Csv => rep.to_csv(),
                OutputFormat::Md => rep.to_markdown(),
            }
        }
        Command::Bandwidth => {
            let loaded = load()?;
            let kernel = cfg.kernel_spec();
            let method = match cfg.bandwidth {
                BandwidthChoice::Rot => BandwidthMethod::Rot,
                BandwidthChoice::Fixed(h) => {
                    let r = BandwidthResult::fixed(h, h);
                    return finish_bandwidth(&loaded, r, None, cfg);
                }
                BandwidthChoice::Auto => cfg.adj_method(),
            };
            let r = select_bandwidths(&loaded.sample, cfg.q, &kernel, method)?;
            let llr = match cfg.estimator {
                EstimatorChoice::Llr => {
                    Some(llr_mse_bandwidth(&loaded.sample, &cfg.inference_config())?)
                }
                EstimatorChoice::Lcqr => None,
            };
            return finish_bandwidth(&loaded, r, llr, cfg);
        }
        Command::Are => {
            let laws: Vec<ErrorLaw> = cfg
                .are
                .laws
                .iter()
                .map(|&i| ErrorLaw::numbered(i))
                .collect::<Result<_>>()?;
            let table = are_table(&laws, &cfg.are.qs, &cfg.kernel_spec())?;
            match cfg.format {
                OutputFormat::Json => to_json(&serde_json::json!({
                    "schema": SCHEMA_VERSION,
                    "command": Command::Are,
                    "kernel": cfg.kernel,
                    "table": table,
                }))?,
                OutputFormat::Csv => table.to_csv(),
                OutputFormat::Md => table.to_markdown(),
            }
        }
        Command::Simulate => {
            let rep = simulate(cfg)?;
            match cfg.format {
                OutputFormat::Json => to_json(&rep)?,
                OutputFormat::Csv => summaries_to_csv(&rep.rows),
                OutputFormat::Md => summaries_to_markdown(&rep.rows),
            }
        }
        Command::Plotdata => {
            let loaded = load()?;
            let artifacts = vec![
                Artifact {
                    name: "bins.csv".into(),
                    contents: binned_means(&loaded, PLOT_BINS),
                },
                Artifact {
                    name: "fit.csv".into(),
                    contents: fitted_curves(&loaded, 200)?,
                },
                Artifact {
                    name: "sweep.csv".into(),
                    contents: bandwidth_sweep(&loaded, cfg)?,
                },
            ];
            let rep = PlotdataReport {
                schema: SCHEMA_VERSION,
                command: Command::Plotdata,
                files: artifacts.iter().map(|a| a.name.clone()).collect(),
                bins_per_side: PLOT_BINS,
                sweep_rows_per_estimator: sweep_bandwidths().len(),
            };
            return Ok(JobOutput {
                primary: to_json(&rep)?,
                artifacts,
            });
        }
    };
    Ok(JobOutput {
        primary,
        artifacts: Vec::new(),
    })
}

fn finish_bandwidth(
    loaded: &LoadedSample,
    result: BandwidthResult,
    llr: Option<f64>,
    cfg: &JobConfig,
) -> Result<JobOutput> {
    let rep = BandwidthReport {
        schema: SCHEMA_VERSION,
        command: Command::Bandwidth,
        n_plus: loaded.sample.n_side(Side::Above),
        n_minus: loaded.sample.n_side(Side::Below),
        result,
        llr_bandwidth: llr,
    };
    let primary = match cfg.format {
        OutputFormat::Json => to_json(&rep)?,
        f => render_fields(rep.fields(), f),
    };
    Ok(JobOutput {
        primary,
        artifacts: Vec::new(),
    })
}
