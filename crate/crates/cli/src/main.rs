//! `hmt`: simulate, fit, score, and verify hidden Markov tree models.
//!
//! Exit codes: 0 on success, 1 on input errors, 2 when a verify/experiment
//! suite records violations.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::RngCore;

use hmt_core::error::HmtError;
use hmt_core::estimation::{
    fit_mle, observed_information, score, FitOptions, InfoMethod, Init,
};
use hmt_core::experiments::{
    run_experiment, run_verify_suite, ExperimentConfig, ExperimentKind, VerificationReport,
    VerifySuite,
};
use hmt_core::inference::log_likelihood;
use hmt_core::model::{HmtTheta, ModelSpec};
use hmt_core::simulate::{sample, RootLaw, Sample};

#[derive(Parser)]
#[command(name = "hmt", version, about = "Hidden Markov tree models on the complete binary tree")]
struct Cli {
    /// Worker threads for replicate loops (results are independent of this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one HMT realization and write it as JSONL.
    Simulate(SimulateArgs),
    /// Fit parameters by EM with quasi-Newton polish.
    Fit(FitArgs),
    /// Print the analytic score at given parameters.
    Score(ScoreArgs),
    /// Print the observed information matrix `-∇²ℓ`.
    Info(InfoArgs),
    /// Run an exact-inequality verification suite.
    Verify(VerifyArgs),
    /// Run a statistical experiment suite.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_name = "model.json")]
    model: PathBuf,
    #[arg(long, value_name = "theta.json")]
    theta: PathBuf,
    #[arg(long)]
    depth: usize,
    /// stationary | dirac:<x> | custom:<path to probabilities json>
    #[arg(long, default_value = "stationary")]
    root_law: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "sample.jsonl")]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, value_name = "sample.jsonl")]
    data: PathBuf,
    #[arg(long, value_name = "model.json")]
    model: PathBuf,
    #[arg(long, default_value_t = 0)]
    root_state: usize,
    /// random:<seed> | moment | file:<theta.json>
    #[arg(long, default_value = "moment")]
    init: String,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, value_name = "fit.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    theta: PathBuf,
    #[arg(long, default_value_t = 0)]
    root_state: usize,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    theta: PathBuf,
    #[arg(long, default_value_t = 0)]
    root_state: usize,
    #[arg(long, value_enum, default_value_t = InfoMethodArg::Louis)]
    method: InfoMethodArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum InfoMethodArg {
    Louis,
    FiniteDiff,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    suite: SuiteArg,
    #[arg(long, value_name = "config.json")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "report.csv")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Forgetting,
    Cauchy,
    Backward,
    TwoVertex,
    Dobrushin,
    Telescoping,
    Block,
}

impl From<SuiteArg> for VerifySuite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Forgetting => VerifySuite::Forgetting,
            SuiteArg::Cauchy => VerifySuite::Cauchy,
            SuiteArg::Backward => VerifySuite::Backward,
            SuiteArg::TwoVertex => VerifySuite::TwoVertex,
            SuiteArg::Dobrushin => VerifySuite::Dobrushin,
            SuiteArg::Telescoping => VerifySuite::Telescoping,
            SuiteArg::Block => VerifySuite::Block,
        }
    }
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, value_name = "config.json")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "report.csv")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Consistency,
    ScoreClt,
    MleClt,
    ObservedInfo,
    Contrast,
    Coupling,
    Ergodic,
}

impl From<KindArg> for ExperimentKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Consistency => ExperimentKind::Consistency,
            KindArg::ScoreClt => ExperimentKind::ScoreClt,
            KindArg::MleClt => ExperimentKind::MleClt,
            KindArg::ObservedInfo => ExperimentKind::ObservedInfo,
            KindArg::Contrast => ExperimentKind::Contrast,
            KindArg::Coupling => ExperimentKind::Coupling,
            KindArg::Ergodic => ExperimentKind::Ergodic,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HmtError> {
    let f = File::open(path)
        .map_err(|e| HmtError::InvalidInput(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(f))
        .map_err(|e| HmtError::InvalidInput(format!("{}: {e}", path.display())))
}

fn read_sample(path: &Path) -> Result<Sample, HmtError> {
    let f = File::open(path)
        .map_err(|e| HmtError::InvalidInput(format!("{}: {e}", path.display())))?;
    Sample::read_jsonl(BufReader::new(f))
}

fn parse_root_law(s: &str) -> Result<RootLaw, HmtError> {
    if s == "stationary" {
        return Ok(RootLaw::Stationary);
    }
    if let Some(x) = s.strip_prefix("dirac:") {
        let x = x
            .parse::<usize>()
            .map_err(|_| HmtError::InvalidInput(format!("bad dirac state in --root-law {s}")))?;
        return Ok(RootLaw::Dirac(x));
    }
    if let Some(path) = s.strip_prefix("custom:") {
        let zeta: Vec<f64> = read_json(Path::new(path))?;
        return Ok(RootLaw::Custom(zeta));
    }
    Err(HmtError::InvalidInput(format!("unrecognized --root-law {s}")))
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    let seed = seed.unwrap_or_else(|| rand::rng().next_u64());
    println!("seed: {seed}");
    seed
}

fn write_report(report: &VerificationReport, out: &Path) -> Result<(), HmtError> {
    let f = File::create(out)
        .map_err(|e| HmtError::InvalidInput(format!("{}: {e}", out.display())))?;
    report.write_csv(BufWriter::new(f))?;
    let summary_path = out.with_extension("summary.json");
    let f = File::create(&summary_path)
        .map_err(|e| HmtError::InvalidInput(format!("{}: {e}", summary_path.display())))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &report.summary_json())?;
    println!(
        "{}: {} cases, {} violations -> {} (+ {})",
        report.kind,
        report.total,
        report.violations,
        out.display(),
        summary_path.display()
    );
    Ok(())
}

fn load_config(path: &Option<PathBuf>, default: ExperimentConfig) -> Result<ExperimentConfig, HmtError> {
    match path {
        Some(p) => {
            let cfg: ExperimentConfig = read_json(p)?;
            cfg.validate()?;
            Ok(cfg)
        }
        None => Ok(default),
    }
}

fn run(cli: Cli) -> Result<bool, HmtError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| HmtError::InvalidInput(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Simulate(args) => {
            let spec: ModelSpec = read_json(&args.model)?;
            spec.validate()?;
            let theta: HmtTheta = read_json(&args.theta)?;
            theta.validate(&spec)?;
            let law = parse_root_law(&args.root_law)?;
            let seed = resolve_seed(args.seed);
            let s = sample(&spec, &theta, args.depth, &law, seed)?;
            let f = File::create(&args.out)
                .map_err(|e| HmtError::InvalidInput(format!("{}: {e}", args.out.display())))?;
            s.write_jsonl(BufWriter::new(f))?;
            println!("wrote {} records to {}", s.len(), args.out.display());
            Ok(true)
        }
        Command::Fit(args) => {
            let spec: ModelSpec = read_json(&args.model)?;
            spec.validate()?;
            let data = read_sample(&args.data)?;
            let init = if args.init == "moment" {
                Init::Moment
            } else if let Some(seed) = args.init.strip_prefix("random:") {
                let seed = seed.parse::<u64>().map_err(|_| {
                    HmtError::InvalidInput(format!("bad seed in --init {}", args.init))
                })?;
                println!("seed: {seed}");
                Init::Random(seed)
            } else if let Some(path) = args.init.strip_prefix("file:") {
                Init::Given(read_json(Path::new(path))?)
            } else {
                return Err(HmtError::InvalidInput(format!("unrecognized --init {}", args.init)));
            };
            let opts = FitOptions { max_iter: args.max_iter, tol: args.tol, ..FitOptions::default() };
            let fit = fit_mle(&data, args.root_state, &spec, init, &opts)?;
            let f = File::create(&args.out)
                .map_err(|e| HmtError::InvalidInput(format!("{}: {e}", args.out.display())))?;
            let out = serde_json::json!({
                "theta_hat": fit.theta_hat,
                "loglik_trace": fit.loglik_trace,
                "iterations": fit.iterations,
                "converged": fit.converged,
                "x_root": fit.x_root,
                "warnings": fit.warnings,
            });
            serde_json::to_writer_pretty(BufWriter::new(f), &out)?;
            println!(
                "fit: loglik {} after {} EM iterations -> {}",
                fit.loglik_trace.last().unwrap(),
                fit.iterations,
                args.out.display()
            );
            Ok(true)
        }
        Command::Score(args) => {
            let spec: ModelSpec = read_json(&args.model)?;
            spec.validate()?;
            let theta: HmtTheta = read_json(&args.theta)?;
            theta.validate(&spec)?;
            let data = read_sample(&args.data)?;
            let sc = score(&spec, &theta, &data, args.root_state)?;
            let ll = log_likelihood(&theta, &data, args.root_state)?;
            let out = serde_json::json!({
                "log_likelihood": ll,
                "score": sc.packed,
                "coordinates": sc.descriptor,
                "x_root": args.root_state,
            });
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, &out)?;
            writeln!(stdout)?;
            Ok(true)
        }
        Command::Info(args) => {
            let spec: ModelSpec = read_json(&args.model)?;
            spec.validate()?;
            let theta: HmtTheta = read_json(&args.theta)?;
            theta.validate(&spec)?;
            let data = read_sample(&args.data)?;
            let method = match args.method {
                InfoMethodArg::Louis => InfoMethod::Louis,
                InfoMethodArg::FiniteDiff => InfoMethod::FiniteDiff,
            };
            let info = observed_information(&spec, &theta, &data, args.root_state, method, 16)?;
            let out = serde_json::json!({
                "observed_information": info.rows(),
                "method": match args.method { InfoMethodArg::Louis => "louis", InfoMethodArg::FiniteDiff => "finite-diff" },
                "normalized": info.normalized,
                "x_root": args.root_state,
            });
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, &out)?;
            writeln!(stdout)?;
            Ok(true)
        }
        Command::Verify(args) => {
            let suite: VerifySuite = args.suite.into();
            let cfg = load_config(&args.config, ExperimentConfig::default_for_suite(suite))?;
            println!("seed: {}", cfg.seed);
            let report = run_verify_suite(suite, &cfg)?;
            write_report(&report, &args.out)?;
            Ok(report.pass())
        }
        Command::Experiment(args) => {
            let kind: ExperimentKind = args.kind.into();
            let cfg = load_config(&args.config, ExperimentConfig::default_for(kind))?;
            println!("seed: {}", cfg.seed);
            let report = run_experiment(kind, &cfg)?;
            write_report(&report, &args.out)?;
            Ok(report.pass())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
