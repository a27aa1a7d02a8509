//! `sindex`: fit single-index directions, run simulation studies and
//! check the estimating equations from the command line.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 estimation error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use sindex::simulation::{
    lemma1_residual, score_diagnostic_curve, Kappa, LawKind, ScoreDiagConfig,
};
use sindex::{
    adaptive_fit, load_dataset, run_monte_carlo, Direction, ErrorLaw, FitConfig, KernelSpec, Link,
    McConfig, McReport, ModelSpec, PredictorLaw,
};

#[derive(Parser)]
#[command(name = "sindex", version, about = "Adaptive estimation of single-index directions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the index direction from a CSV file with columns x1,...,xp,y.
    Fit(FitArgs),
    /// Run a Monte Carlo comparison described by a JSON config.
    Simulate(SimulateArgs),
    /// Monte Carlo check of the projected estimating equation at the true direction.
    CheckLemma1(Lemma1Args),
    /// Weighted L2 error of the kernel score across sample sizes.
    ScoreDiag(ScoreDiagArgs),
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON file with fit settings (kernel, use_sample_splitting, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_split: bool,
    #[arg(long)]
    discretize: bool,
    #[command(flatten)]
    kernel: KernelArgs,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory for mc_report.json and mc_report.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    no_split: bool,
    #[arg(long)]
    discretize: bool,
}

#[derive(Args)]
struct Lemma1Args {
    /// One of constant, ty, y_cubed, t2y, true_score.
    #[arg(long)]
    kappa: String,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    law: LawArgs,
    #[arg(long, default_value_t = 1_000_000)]
    n_mc: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreDiagArgs {
    /// JSON file mirroring the score-diagnostic settings; flags are ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    law: LawArgs,
    #[arg(long, value_delimiter = ',', default_value = "500,1000,2000,4000")]
    n_grid: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    replications: usize,
    #[arg(long, default_value_t = 5000)]
    eval_size: usize,
    #[command(flatten)]
    kernel: KernelArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Link: identity, sine or cubic_smooth.
    #[arg(long, default_value = "identity")]
    model: String,
    /// Error law: gaussian, laplace or student_t.
    #[arg(long, default_value = "gaussian")]
    error: String,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Degrees of freedom for student_t errors.
    #[arg(long, default_value_t = 5.0)]
    nu: f64,
}

#[derive(Args)]
struct LawArgs {
    /// Predictor law: gaussian, elliptical_t or uniform_cube.
    #[arg(long, default_value = "gaussian")]
    law: String,
    #[arg(long, default_value_t = 3)]
    p: usize,
    /// Degrees of freedom for elliptical_t predictors.
    #[arg(long, default_value_t = 5.0)]
    law_nu: f64,
}

#[derive(Args)]
struct KernelArgs {
    #[arg(long)]
    bandwidth_constant: Option<f64>,
    #[arg(long)]
    trim_constant: Option<f64>,
}

enum Failure {
    Input(String),
    Estimation(String),
}

impl From<sindex::Error> for Failure {
    fn from(e: sindex::Error) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Estimation(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn input<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Input(format!("{context}: {e}"))
}

fn check(problems: Vec<String>) -> CliResult<()> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Failure::Input(format!("invalid configuration:\n  {}", problems.join("\n  "))))
    }
}

impl ModelArgs {
    fn spec(&self) -> CliResult<ModelSpec> {
        let link = Link::from_name(&self.model).ok_or_else(|| {
            Failure::Input(format!("unknown model {:?}; expected one of {}", self.model, Link::NAMES.join(", ")))
        })?;
        let error = ErrorLaw::from_name(&self.error, self.nu).ok_or_else(|| {
            Failure::Input(format!("unknown error law {:?}; expected one of {}", self.error, ErrorLaw::NAMES.join(", ")))
        })?;
        let spec = ModelSpec::new(link, error, self.sigma);
        check(spec.validate())?;
        Ok(spec)
    }
}

impl LawArgs {
    fn law(&self) -> CliResult<PredictorLaw> {
        let law = PredictorLaw::from_name(&self.law, self.p, self.law_nu).ok_or_else(|| {
            Failure::Input(format!(
                "unknown law {:?}; expected one of {}",
                self.law,
                PredictorLaw::NAMES.join(", ")
            ))
        })?;
        check(law.validate())?;
        Ok(law)
    }
}

impl KernelArgs {
    fn apply(&self, kernel: &mut KernelSpec) {
        if let Some(c) = self.bandwidth_constant {
            kernel.bandwidth_constant = c;
        }
        if let Some(c) = self.trim_constant {
            kernel.trim_constant = c;
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(input(&path.display().to_string()))?;
    serde_json::from_str(&text).map_err(input(&path.display().to_string()))
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text).map_err(input(&path.display().to_string())),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(input("stdout")),
    }
}

/// Runs `f` on a pool of `threads` workers, or on the global pool.
fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Failure::Input("--threads must be at least 1".into())),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(input("thread pool"))?;
            Ok(pool.install(f))
        }
    }
}

fn cmd_fit(args: FitArgs) -> CliResult<()> {
    let mut cfg: FitConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => FitConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.no_split {
        cfg.use_sample_splitting = false;
    }
    if args.discretize {
        cfg.use_discretization = true;
    }
    args.kernel.apply(&mut cfg.kernel);
    check(cfg.validate())?;
    let file = fs::File::open(&args.data).map_err(input(&args.data.display().to_string()))?;
    let data = load_dataset(std::io::BufReader::new(file))?;
    let result = adaptive_fit(&data, &cfg)?;
    if result.diagnostics.null_model_warning {
        eprintln!(
            "warning: least-squares slope norm {:.3e} is below 1e-2 sd(y); y may not depend on x",
            result.diagnostics.ols_slope_norm
        );
    }
    emit(&result.report(), args.out.as_deref())
}

fn summary_table(report: &McReport) -> String {
    let mut s = format!("{:<16} {:>7} {:>14} {:>11} {:>9}\n", "estimator", "n", "median_angle", "efficiency", "failures");
    for c in &report.cells {
        let eff = c.efficiency_ratio.map_or("-".to_string(), |r| format!("{r:.3}"));
        s.push_str(&format!(
            "{:<16} {:>7} {:>14.5} {:>11} {:>9}\n",
            c.estimator.name(),
            c.n,
            c.median_angular_error,
            eff,
            c.failures
        ));
    }
    for (e, slope) in &report.rate_slopes {
        s.push_str(&format!("rate slope {:<16} {slope:.3}\n", e.name()));
    }
    s
}

fn cmd_simulate(args: SimulateArgs) -> CliResult<()> {
    let mut cfg: McConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.no_split {
        cfg.fit.use_sample_splitting = false;
    }
    if args.discretize {
        cfg.fit.use_discretization = true;
    }
    check(cfg.validate())?;
    let report = with_threads(args.threads, || run_monte_carlo(&cfg))??;
    fs::create_dir_all(&args.out).map_err(input(&args.out.display().to_string()))?;
    emit(&report, Some(&args.out.join("mc_report.json")))?;
    let csv_path = args.out.join("mc_report.csv");
    fs::write(&csv_path, report.to_csv()).map_err(input(&csv_path.display().to_string()))?;
    print!("{}", summary_table(&report));
    Ok(())
}

#[derive(Serialize)]
struct Lemma1Report {
    kappa: Kappa,
    model: ModelSpec,
    law: PredictorLaw,
    beta: Direction,
    seed: u64,
    #[serde(flatten)]
    residual: sindex::simulation::Lemma1Residual,
}

fn cmd_check_lemma1(args: Lemma1Args) -> CliResult<()> {
    let kappa = Kappa::from_name(&args.kappa).ok_or_else(|| {
        let names: Vec<&str> = Kappa::ALL.iter().map(|k| k.name()).collect();
        Failure::Input(format!("unknown kappa {:?}; expected one of {}", args.kappa, names.join(", ")))
    })?;
    let model = args.model.spec()?;
    let law = args.law.law()?;
    if args.n_mc < 100 {
        return Err(Failure::Input(format!("--n-mc must be at least 100, got {}", args.n_mc)));
    }
    let beta = Direction::equiangular(law.p)?;
    let k = |t: f64, y: f64| kappa.eval(&model, t, y);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let residual = lemma1_residual(&k, &beta, &model, &law, args.n_mc, &mut rng);
    if residual.clipped > 0 {
        eprintln!("warning: {} values of kappa were clipped at ±1e6", residual.clipped);
    }
    if law.kind == LawKind::UniformCube {
        eprintln!("note: uniform_cube predictors violate the linearity condition; the residual need not vanish");
    }
    let report = Lemma1Report {
        kappa,
        model,
        law,
        beta,
        seed: args.seed,
        residual,
    };
    emit(&report, args.out.as_deref())
}

#[derive(Serialize)]
struct ScoreDiagOutput {
    config: ScoreDiagConfig,
    #[serde(flatten)]
    report: sindex::simulation::ScoreDiagReport,
}

fn cmd_score_diag(args: ScoreDiagArgs) -> CliResult<()> {
    let mut cfg = match &args.config {
        Some(path) => read_json(path)?,
        None => {
            let mut kernel = KernelSpec::default();
            args.kernel.apply(&mut kernel);
            ScoreDiagConfig {
                model: args.model.spec()?,
                law: args.law.law()?,
                beta0: None,
                n_grid: args.n_grid.clone(),
                replications: args.replications,
                kernel,
                eval_size: args.eval_size,
                seed: 0,
            }
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    check(cfg.validate())?;
    let report = with_threads(args.threads, || score_diagnostic_curve(&cfg))??;
    emit(&ScoreDiagOutput { config: cfg, report }, args.out.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::CheckLemma1(a) => cmd_check_lemma1(a),
        Command::ScoreDiag(a) => cmd_score_diag(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Estimation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
