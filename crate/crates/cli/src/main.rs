use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rdlcqr::io::{self, BandwidthChoice, Command, ErrorReport, JobConfig, OutputFormat};
use rdlcqr::montecarlo::{EstimatorKind, MeanModel};
use rdlcqr::{KernelFamily, RdError};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Engine(#[from] RdError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn report(&self) -> ErrorReport {
        match self {
            CliError::Engine(e) => ErrorReport::from(e),
            CliError::Usage(m) => ErrorReport {
                schema: io::SCHEMA_VERSION,
                code: "usage".into(),
                message: m.clone(),
                exit_code: 2,
            },
        }
    }
}

/// Regression-discontinuity estimation with local composite quantile regression.
#[derive(Debug, Parser)]
#[command(name = "rdlcqr", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Point estimate and inference at the cutoff.
    Estimate(DataArgs),
    /// Bandwidth selection only.
    Bandwidth(DataArgs),
    /// Asymptotic relative efficiency table.
    Are(AreArgs),
    /// Monte Carlo study.
    Simulate(SimArgs),
    /// Binned means, fitted curves and a bandwidth sweep for plotting.
    Plotdata(DataArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON job file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_kernel)]
    kernel: Option<KernelFamily>,
    #[arg(long)]
    q: Option<usize>,
    /// auto, rot or a positive number.
    #[arg(long, value_parser = parse_with::<BandwidthChoice>)]
    bandwidth: Option<BandwidthChoice>,
    #[arg(long)]
    equal_bandwidth: bool,
    /// lcqr or llr.
    #[arg(long, value_parser = parse_with::<io::EstimatorChoice>)]
    estimator: Option<io::EstimatorChoice>,
    /// asymptotic or fixed-n.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<rdlcqr::sandwich::SandwichMode>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// json, csv or md; inferred from the --out extension when omitted.
    #[arg(long, value_parser = parse_with::<OutputFormat>)]
    format: Option<OutputFormat>,
    /// Output file (a directory for plotdata); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[command(flatten)]
    common: Common,
    /// Input CSV with a header row.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    x: Option<String>,
    #[arg(long)]
    y: Option<String>,
    #[arg(long)]
    t: Option<String>,
    /// Covariate columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    z: Vec<String>,
    #[arg(long)]
    cutoff: Option<f64>,
    /// sharp, fuzzy or kink.
    #[arg(long, value_parser = parse_with::<io::Design>)]
    design: Option<io::Design>,
    #[arg(long, allow_hyphen_values = true)]
    tau0: Option<f64>,
    #[arg(long)]
    invert_ci: bool,
}

#[derive(Debug, Args)]
struct AreArgs {
    #[command(flatten)]
    common: Common,
    /// Law indices 1..=5, comma separated.
    #[arg(long, value_delimiter = ',')]
    laws: Vec<usize>,
    /// Values of q, comma separated.
    #[arg(long = "qs", alias = "q-list", value_delimiter = ',')]
    qs: Vec<usize>,
}

#[derive(Debug, Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    /// lee or lm.
    #[arg(long, value_parser = parse_model)]
    model: Option<MeanModel>,
    /// Error law 1..=5.
    #[arg(long)]
    dgp: Option<usize>,
    #[arg(long)]
    hetero: bool,
    /// Heteroskedastic scale 2 + cos(2 pi x)/10 instead of (2 + cos(2 pi x))/10.
    #[arg(long)]
    literal_hetero: bool,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    /// Comma separated: cqr, cqr-bc, llr, kink, fuzzy-test.
    #[arg(long, value_delimiter = ',', value_parser = parse_estimator)]
    estimators: Vec<EstimatorKind>,
    /// Finite-sample sandwich; same as --mode fixed-n.
    #[arg(long)]
    fixed_n: bool,
    /// Laplace errors at scale 1 instead of unit variance.
    #[arg(long)]
    raw_scale: bool,
    /// Add the fuzzy treatment overlay.
    #[arg(long)]
    fuzzy: bool,
    #[arg(long)]
    kink_bandwidth: Option<f64>,
    #[arg(long, env = "RDLCQR_THREADS")]
    threads: Option<usize>,
}

fn parse_with<T: std::str::FromStr<Err = RdError>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: RdError| e.to_string())
}

fn parse_kernel(s: &str) -> Result<KernelFamily, String> {
    s.parse::<KernelFamily>().map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<rdlcqr::sandwich::SandwichMode, String> {
    io::parse_mode(s).map_err(|e| e.to_string())
}

fn parse_model(s: &str) -> Result<MeanModel, String> {
    match s {
        "lee" => Ok(MeanModel::Lee),
        "lm" => Ok(MeanModel::Lm),
        other => Err(format!("unknown model `{other}`")),
    }
}

fn parse_estimator(s: &str) -> Result<EstimatorKind, String> {
    EstimatorKind::parse(s).map_err(|e| e.to_string())
}

fn base_config(path: Option<&Path>) -> Result<JobConfig, CliError> {
    match path {
        None => Ok(JobConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| RdError::Io(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn format_from_extension(out: Option<&Path>) -> Option<OutputFormat> {
    match out?.extension()?.to_str()? {
        "json" => Some(OutputFormat::Json),
        "csv" => Some(OutputFormat::Csv),
        "md" => Some(OutputFormat::Md),
        _ => None,
    }
}

fn apply_common(cfg: &mut JobConfig, c: &Common) {
    if let Some(k) = c.kernel {
        cfg.kernel = k;
    }
    if let Some(q) = c.q {
        cfg.q = q;
    }
    if let Some(b) = c.bandwidth {
        cfg.bandwidth = b;
    }
    cfg.equal_bandwidth |= c.equal_bandwidth;
    if let Some(e) = c.estimator {
        cfg.estimator = e;
    }
    if let Some(m) = c.mode {
        cfg.mode = m;
    }
    if let Some(l) = c.level {
        cfg.level = l;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(f) = c.format.or_else(|| format_from_extension(c.out.as_deref())) {
        cfg.format = f;
    }
}

fn apply_data(cfg: &mut JobConfig, a: &DataArgs) {
    if let Some(p) = &a.input {
        cfg.input = Some(p.clone());
    }
    if let Some(x) = &a.x {
        cfg.columns.x = x.clone();
    }
    if let Some(y) = &a.y {
        cfg.columns.y = y.clone();
    }
    if let Some(t) = &a.t {
        cfg.columns.t = Some(t.clone());
    }
    if !a.z.is_empty() {
        cfg.columns.z = a.z.clone();
    }
    if let Some(c) = a.cutoff {
        cfg.cutoff = c;
    }
    if let Some(d) = a.design {
        cfg.design = d;
    }
    if let Some(t) = a.tau0 {
        cfg.tau0 = t;
    }
    cfg.invert_ci |= a.invert_ci;
}

fn build(cli: &Cli) -> Result<(JobConfig, Option<PathBuf>), CliError> {
    let (common, command) = match &cli.command {
        Cmd::Estimate(a) => (&a.common, Command::Estimate),
        Cmd::Bandwidth(a) => (&a.common, Command::Bandwidth),
        Cmd::Plotdata(a) => (&a.common, Command::Plotdata),
        Cmd::Are(a) => (&a.common, Command::Are),
        Cmd::Simulate(a) => (&a.common, Command::Simulate),
    };
    let mut cfg = base_config(common.config.as_deref())?;
    cfg.command = command;
    apply_common(&mut cfg, common);
    match &cli.command {
        Cmd::Estimate(a) | Cmd::Bandwidth(a) | Cmd::Plotdata(a) => apply_data(&mut cfg, a),
        Cmd::Are(a) => {
            if !a.laws.is_empty() {
                cfg.are.laws = a.laws.clone();
            }
            if !a.qs.is_empty() {
                cfg.are.qs = a.qs.clone();
            }
        }
        Cmd::Simulate(a) => {
            let s = &mut cfg.simulate;
            if let Some(m) = &a.model {
                s.model = m.clone();
            }
            if let Some(d) = a.dgp {
                s.dgp = d;
            }
            s.hetero |= a.hetero;
            s.literal_hetero |= a.literal_hetero;
            if let Some(n) = a.n {
                s.n = n;
            }
            if let Some(r) = a.reps {
                s.reps = r;
            }
            if !a.estimators.is_empty() {
                s.estimators = a.estimators.clone();
            }
            s.raw_scale |= a.raw_scale;
            s.fuzzy |= a.fuzzy;
            if let Some(h) = a.kink_bandwidth {
                s.kink_bandwidth = h;
            }
            if a.threads.is_some() {
                s.threads = a.threads;
            }
            if a.fixed_n {
                cfg.mode = rdlcqr::sandwich::SandwichMode::FixedN;
            }
        }
    }
    Ok((cfg, common.out.clone()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| RdError::Io(format!("{}: {e}", path.display())).into())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let (cfg, out) = build(cli)?;
    let output = io::run_job(&cfg)?;
    if cfg.command == Command::Plotdata {
        let dir = out.unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir)
            .map_err(|e| RdError::Io(format!("{}: {e}", dir.display())))?;
        for a in &output.artifacts {
            write_file(&dir.join(&a.name), &a.contents)?;
        }
        print!("{}", output.primary);
        return Ok(());
    }
    match out {
        Some(p) => write_file(&p, &output.primary),
        None => {
            print!("{}", output.primary);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let rep = e.report();
            eprintln!(
                "{}",
                serde_json::to_string(&rep).unwrap_or_else(|_| rep.message.clone())
            );
            ExitCode::from(rep.exit_code as u8)
        }
    }
}
