use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use l96calib::harness::config::extract_overrides;
use l96calib::harness::{rerun, run_command, Command, ExperimentConfig, HarnessError, Profile};

/// Simulate the two-scale Lorenz-96 system and calibrate its parameters.
///
/// Any setting can be overridden with a flag named after its dotted key,
/// for example `--system.K 8` or `--eki.sizes=[10]`.
#[derive(Parser, Debug)]
#[command(name = "l96calib", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML file with dotted section keys
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Built-in defaults: `paper` or `smoke`
    #[arg(long, global = true, default_value = "paper")]
    profile: String,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Integrate at the true parameters; writes trajectory.csv and moments.csv
    Simulate(Common),
    /// Potential energy along one parameter; writes scan_<param>.csv
    Scan(Common),
    /// Ensemble Kalman inversions over noise levels and ensemble sizes
    Eki(Common),
    /// Posterior sampling of (F, h, c, b) from the full system
    Mcmc(Common),
    /// Posterior sampling of (h, c, b) from a single fast column
    Fast(Common),
    /// Numerical self-checks with measured values and thresholds
    Validate(Common),
    /// Repeat a run from its manifest.json
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn run() -> Result<(), HarnessError> {
    let (args, overrides) = extract_overrides(std::env::args())?;
    let cli = Cli::try_parse_from(args).map_err(|e| {
        let _ = e.print();
        match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => std::process::exit(0),
            _ => HarnessError::Config("bad command line".into()),
        }
    })?;
    let (command, common) = match cli.command {
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::Scan(c) => (Command::Scan, c),
        Cmd::Eki(c) => (Command::Eki, c),
        Cmd::Mcmc(c) => (Command::Mcmc, c),
        Cmd::Fast(c) => (Command::Fast, c),
        Cmd::Validate(c) => (Command::Validate, c),
        Cmd::Rerun { manifest, out } => {
            let outcome = rerun(&manifest, &out)?;
            eprintln!("rerun of `{}` written to {}", outcome.manifest.command, out.display());
            return Ok(());
        }
    };
    let profile: Profile = common.profile.parse()?;
    let mut config = ExperimentConfig::load(profile, common.config.as_deref(), &overrides)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let outcome = run_command(command, &config, &common.out).inspect_err(|e| {
        if let HarnessError::Validation(_) = e {
            if let Ok(text) = std::fs::read_to_string(common.out.join("validate.txt")) {
                print!("{text}");
            }
        }
    })?;
    if let Some(report) = &outcome.report {
        print!("{report}");
    }
    eprintln!(
        "{} finished in {:.1} s; outputs in {}",
        command.name(),
        outcome.manifest.wall_clock_seconds,
        common.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
