use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpps::commands::{cmd_experiment, cmd_restore, ExperimentKind};
use dpps::config::RunConfig;
use dpps::Error;

/// Posterior sampling for linear inverse problems with analytic diffusion priors.
#[derive(Parser)]
#[command(name = "dpps", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Restore one measurement and write the estimate, trace and summary.
    Restore(RunArgs),
    /// Run a named experiment (variance, convergence, lambda-sweep,
    /// error-accum, restoration, overhead).
    Experiment {
        name: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Parse and validate a config file.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn load(config: Option<&Path>) -> Result<RunConfig, Error> {
    match config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
}

fn resolve(args: &RunArgs) -> Result<(RunConfig, PathBuf), ExitCode> {
    let mut cfg = load(args.config.as_deref()).map_err(|e| fail(&e, EXIT_CONFIG))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn fail(err: &Error, code: u8) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(code)
}

fn exit_for(err: &Error) -> ExitCode {
    let code = if err.is_config_error() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    };
    fail(err, code)
}

fn restore(args: &RunArgs) -> ExitCode {
    let (cfg, out) = match resolve(args) {
        Ok(v) => v,
        Err(code) => return code,
    };
    let steps = cfg.schedule.steps;
    let mut done = 0;
    let mut progress = |t: usize| {
        done += 1;
        eprint!("\rstep {done}/{steps} (t = {t})   ");
        let _ = std::io::stderr().flush();
    };
    let result = cmd_restore(&cfg, &out, &mut progress);
    eprintln!();
    match result {
        Ok(summary) => {
            println!("final residual {:.6e}", summary.final_residual);
            if let Some(mse) = summary.oracle_mse {
                println!("oracle MSE {mse:.6e}");
            }
            if let Some(p) = summary.psnr {
                println!("PSNR {p:.3} dB");
            }
            println!("wrote {} to {}", summary.files.join(", "), out.display());
            ExitCode::SUCCESS
        }
        Err(e) => exit_for(&e),
    }
}

fn experiment(name: &str, args: &RunArgs) -> ExitCode {
    let kind: ExperimentKind = match name.parse() {
        Ok(k) => k,
        Err(e) => return fail(&e, EXIT_CONFIG),
    };
    let (cfg, out) = match resolve(args) {
        Ok(v) => v,
        Err(code) => return code,
    };
    eprintln!("running experiment {}", kind.name());
    match cmd_experiment(kind, &cfg, &out) {
        Ok((report, path)) => {
            for (k, v) in &report.derived {
                println!("{k} = {v}");
            }
            for (k, v) in &report.verdicts {
                println!("{k} = {v}");
            }
            println!("wrote {}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => exit_for(&e),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match &cli.command {
        Command::Restore(args) => restore(args),
        Command::Experiment { name, run } => experiment(name, run),
        Command::ValidateConfig { config } => match RunConfig::load(config) {
            Ok(cfg) => {
                let problem = cfg.problem().map(|p| p.name).unwrap_or_default();
                println!("{}: ok (problem {problem})", config.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e, EXIT_CONFIG),
        },
    }
}
