//! Command-line front end for the trajectory engine.
//!
//! ```text
//! simulator <run|compare|scan-dt|verify|dump-unitary> <config.toml>
//!           [--seed N] [--workers N] [--out DIR]
//! ```
//!
//! Logging is controlled by the `SIM_LOG` environment variable
//! (`off`, `info`, `debug`; default `off`).
//!
//! Exit codes: 0 success, 2 config error, 3 model build error,
//! 4 simulation/verification error.

use clap::{Parser, Subcommand};
use qtraj::experiment::{
    cmd_compare, cmd_dump_unitary, cmd_run, cmd_scan_dt, cmd_verify, load_config, ExperimentError,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "simulator", version, about = "Stochastic trajectory engine for open spin systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Path to the TOML experiment config.
    config: PathBuf,
    /// Override the RNG seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Override the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the trajectory ensemble and write time series + summary.
    Run(CommonArgs),
    /// Run the ensemble and compare against the exact solver.
    Compare(CommonArgs),
    /// Sweep the time step in sampling-free channel mode and fit the error.
    #[command(name = "scan-dt")]
    ScanDt(CommonArgs),
    /// Run the invariant suite (unitarity, completeness, traces, Choi bound).
    Verify(CommonArgs),
    /// Write each channel's assembled dilation unitary as CSV.
    DumpUnitary(CommonArgs),
}

fn init_logging() {
    let level = std::env::var("SIM_LOG").unwrap_or_else(|_| "off".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
}

fn config_stem(path: &std::path::Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "experiment".into())
}

fn execute(cmd: &Command) -> Result<(), ExperimentError> {
    let args = match cmd {
        Command::Run(a)
        | Command::Compare(a)
        | Command::ScanDt(a)
        | Command::Verify(a)
        | Command::DumpUnitary(a) => a,
    };
    if let Some(n) = args.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ExperimentError::ConfigParse(format!("worker pool: {e}")))?;
    }
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.sim.seed = seed;
    }
    let stem = config_stem(&args.config);
    let out = args.out.as_deref();
    match cmd {
        Command::Run(_) => {
            for s in cmd_run(&cfg, &stem, out)? {
                println!(
                    "{}: K={} K_surv={} K_eff={:.1} success_emp={:.6} success_pred={:.6}",
                    s.label, s.k_total, s.k_survivors, s.k_eff,
                    s.success_empirical, s.success_predicted
                );
            }
            Ok(())
        }
        Command::Compare(_) => {
            for s in cmd_compare(&cfg, &stem, out)? {
                println!("{}: K={} K_eff={:.1}", s.label, s.k_total, s.k_eff);
            }
            Ok(())
        }
        Command::ScanDt(_) => {
            let s = cmd_scan_dt(&cfg, &stem, out)?;
            match &s.scaling_fit {
                Some(f) => println!(
                    "{}: exponent={:.4} prefactor={:.4e} r2={:.6}",
                    s.label, f.exponent, f.prefactor, f.r_squared
                ),
                None => println!("{}: scaling fit unavailable", s.label),
            }
            Ok(())
        }
        Command::Verify(_) => {
            let report = cmd_verify(&cfg)?;
            for c in &report.checks {
                println!(
                    "{}: {} (measured {:.3e}, tolerance {:.3e})",
                    c.name,
                    if c.passed { "PASS" } else { "FAIL" },
                    c.measured,
                    c.tolerance
                );
            }
            if report.all_passed {
                println!("verify: all checks passed");
                Ok(())
            } else {
                Err(ExperimentError::Simulation(
                    "one or more invariant checks failed".into(),
                ))
            }
        }
        Command::DumpUnitary(_) => {
            for f in cmd_dump_unitary(&cfg, &stem, out)? {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
