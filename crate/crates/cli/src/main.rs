use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hbridge::verify::{gradient_suite, oracle_suite, reconstruction_suite, Check};
use hbridge::EditTrace;
use hbridge_cli::config::{ExperimentConfig, OUT_DIR_ENV};
use hbridge_cli::{runner, svg, CliError};

#[derive(Parser)]
#[command(name = "hbridge", version, about = "Bridge-based editing experiments on analytic diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write report, traces, plots and manifest.
    Run {
        config: PathBuf,
        /// Output directory; overrides the config and the environment.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run the exact-reference check suites.
    Verify {
        #[arg(value_enum, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Instances, probes or seeds per suite.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Render a trace CSV as SVG.
    Plot {
        trace: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Oracle,
    Gradients,
    Reconstruction,
    All,
}

fn out_dir(flag: Option<PathBuf>, config: &Path, raw: &str) -> Result<PathBuf, CliError> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if let Some(p) = std::env::var_os(OUT_DIR_ENV) {
        return Ok(PathBuf::from(p));
    }
    Ok(ExperimentConfig::parse(raw, &config.display().to_string())?.output.dir)
}

fn run(config: PathBuf, out: Option<PathBuf>) -> Result<(), CliError> {
    let raw = fs::read_to_string(&config)
        .map_err(|e| CliError::Validation(format!("{}: {e}", config.display())))?;
    let dir = out_dir(out, &config, &raw)?;
    let summary = runner::run(&raw, &config.display().to_string(), &dir)?;
    println!("{:>4}  {:>7}  {:>10}  {:>2}  {:>16}  {:>12}", "cell", "w_edit", "w_hat_orig", "K", "target_posterior", "faithfulness");
    for c in &summary.cells {
        println!(
            "{:>4}  {:>7}  {:>10}  {:>2}  {:>16.4}  {:>12.4}",
            c.cell.index,
            c.cell.w_edit,
            c.cell.w_hat_orig,
            c.cell.implicit_steps,
            c.report.target_posterior.mean,
            c.report.faithfulness.mean
        );
    }
    println!("wrote {} artifacts to {}", summary.manifest.artifacts.len(), dir.display());
    Ok(())
}

fn verify(suite: Suite, seed: u64, budget: Option<usize>) -> Result<(), CliError> {
    let mut checks: Vec<Check> = Vec::new();
    if matches!(suite, Suite::Oracle | Suite::All) {
        checks.extend(oracle_suite(seed, budget.unwrap_or(100))?);
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        checks.extend(gradient_suite(seed, budget.unwrap_or(100))?);
    }
    if matches!(suite, Suite::Reconstruction | Suite::All) {
        checks.extend(reconstruction_suite(seed, budget.unwrap_or(32))?);
    }
    println!("{:<48}  {:>6}  {:>10}  {:>9}  result", "check", "cases", "max_error", "tolerance");
    for c in &checks {
        println!(
            "{:<48}  {:>6}  {:>10.3e}  {:>9.1e}  {}",
            c.name,
            c.cases,
            c.max_error,
            c.tolerance,
            if c.passed() { "PASS" } else { "FAIL" }
        );
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} check(s) failed")));
    }
    Ok(())
}

fn plot(trace: PathBuf, out: Option<PathBuf>) -> Result<(), CliError> {
    let file = fs::File::open(&trace).map_err(|e| CliError::Validation(format!("{}: {e}", trace.display())))?;
    let tr = EditTrace::<f64>::read_csv(file)
        .map_err(|e| CliError::Validation(format!("{}: {e}", trace.display())))?;
    let out = out.unwrap_or_else(|| trace.with_extension("svg"));
    let title = trace.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    fs::write(&out, svg::render(&title, &[], &[tr]))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run { config, out } => run(config, out),
        Command::Verify { suite, seed, budget } => verify(suite, seed, budget),
        Command::Plot { trace, out } => plot(trace, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
