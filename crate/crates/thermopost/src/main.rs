use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thermopost::commands;
use thermopost::config::{thread_count, RunConfig};
use thermopost::error::{exit, Error};
use thermopost::pipeline::Method;

#[derive(Parser)]
#[command(name = "thermopost", version, about = "Posterior variance of initial temperature fields")]
struct Cli {
    /// more log output (repeatable)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SpectrumMethod {
    Direct,
    Tensor,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble the configured geometry and write matrices plus manifest.
    Assemble {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Posterior variance field and run report.
    Posterior {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long, value_enum, default_value = "direct")]
        method: Method,
        /// overrides outputs.dir
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Difference statistics of two variance CSV files.
    Compare {
        field_a: PathBuf,
        field_b: PathBuf,
        /// write the difference field here
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Leading eigenvalues of the prior-preconditioned misfit Hessian.
    Spectrum {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long, value_enum, default_value = "both")]
        method: SpectrumMethod,
        #[arg(short, long, default_value = "spectrum.csv")]
        out: PathBuf,
    },
    /// Forward simulation from a uniform initial temperature.
    Simulate {
        #[arg(short, long)]
        config: PathBuf,
        /// K
        #[arg(long, default_value_t = 0.0)]
        initial: f64,
        #[arg(short, long, default_value = "trajectory.csv")]
        out: PathBuf,
    },
}

fn load(path: &Path) -> Result<RunConfig, Error> {
    let cfg = RunConfig::load(path)?;
    if let Some(n) = thread_count(cfg.run.threads)? {
        // a second initialization is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8, (Error, Option<Method>)> {
    let plain = |e: Error| (e, None);
    match cli.command {
        Command::Assemble { config, out } => {
            let cfg = load(&config).map_err(plain)?;
            let (_, summary) = commands::assemble(&cfg, &out).map_err(plain)?;
            println!("{summary}");
            println!("wrote {}", out.display());
            Ok(exit::SUCCESS)
        }
        Command::Posterior { config, method, out } => {
            let mut cfg = load(&config).map_err(plain)?;
            if let Some(out) = out {
                cfg.outputs.dir = out;
            }
            let outcome = commands::posterior(&cfg, method).map_err(|e| (e, Some(method)))?;
            print!("{}", outcome.table);
            println!("report: {}", outcome.report_path.display());
            if outcome.failures.is_empty() {
                Ok(exit::SUCCESS)
            } else {
                for f in &outcome.failures {
                    eprintln!("error: {f}");
                }
                Ok(exit::NON_CONVERGENCE)
            }
        }
        Command::Compare { field_a, field_b, out } => {
            let c = commands::compare(&field_a, &field_b, out.as_deref()).map_err(plain)?;
            println!("{}", serde_json::to_string_pretty(&c).expect("serializable"));
            Ok(exit::SUCCESS)
        }
        Command::Spectrum { config, method, out } => {
            let cfg = load(&config).map_err(plain)?;
            let methods: &[Method] = match method {
                SpectrumMethod::Direct => &[Method::Direct],
                SpectrumMethod::Tensor => &[Method::Tensor],
                SpectrumMethod::Both => &[Method::Direct, Method::Tensor],
            };
            let results = commands::spectrum(&cfg, methods, &out).map_err(|e| (e, Some(Method::Direct)))?;
            let mut code = exit::SUCCESS;
            for (m, values, converged) in &results {
                println!("{}: {} eigenvalues", m.name(), values.len());
                if !converged {
                    eprintln!("error: {} eigensolver did not converge", m.name());
                    code = exit::NON_CONVERGENCE;
                }
            }
            println!("wrote {}", out.display());
            Ok(code)
        }
        Command::Simulate { config, initial, out } => {
            let cfg = load(&config).map_err(plain)?;
            commands::simulate_outputs(&cfg, initial, &out).map_err(plain)?;
            println!("wrote {}", out.display());
            Ok(exit::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err((e, method)) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            if code == exit::RESOURCE && method == Some(Method::Direct) {
                eprintln!("hint: the dense sensitivity matrix does not fit; rerun with --method tensor");
            }
            ExitCode::from(code)
        }
    }
}
