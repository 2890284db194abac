use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use taxiswalk::io::AngleUnits;
use taxiswalk::{Error, ErrorCategory};

mod commands;

/// Fit and simulate consensus von Mises hidden (semi-)Markov movement models.
#[derive(Debug, Parser)]
#[command(name = "taxiswalk", version)]
struct Cli {
    /// Worker threads for parallel work (multistart EM, Hessians). Defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Trajectory CSV file.
    #[arg(long)]
    data: PathBuf,
    /// Angles in the file are in degrees.
    #[arg(long)]
    degrees: bool,
    /// Derive directions and distances from easting/northing columns.
    #[arg(long)]
    from_positions: bool,
}

impl DataArgs {
    fn units(&self) -> AngleUnits {
        if self.degrees {
            AngleUnits::Degrees
        } else {
            AngleUnits::Radians
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate target-pursuit walks and write them as trajectory CSVs with truth columns.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Number of independent walks.
        #[arg(long, default_value_t = 1)]
        reps: usize,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write angles in degrees.
        #[arg(long)]
        degrees: bool,
    },
    /// Fit a model by multistart EM and report estimates with standard errors.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Smoothed state probabilities under given parameters.
    Decode {
        #[command(flatten)]
        data: DataArgs,
        /// Parameter JSON (the `params.json` or `fit.json` written by `fit`).
        #[arg(long)]
        params: PathBuf,
        /// Run config, used for target selection and the hidden-process kind.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV (default: decode.csv).
        #[arg(long, default_value = "decode.csv")]
        out: PathBuf,
    },
    /// Step-length mixture, critical distance and turning-angle diagnostics.
    Explore {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "explore")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Usage => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numerical => 4,
    }
}

fn run(cli: Cli) -> taxiswalk::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate {
            config,
            reps,
            seed,
            out,
            degrees,
        } => commands::simulate(&config, reps, seed, out, degrees),
        Command::Fit { data, config, out } => {
            commands::fit(&data.data, data.units(), data.from_positions, &config, out)
        }
        Command::Decode {
            data,
            params,
            config,
            out,
        } => commands::decode(
            &data.data,
            data.units(),
            data.from_positions,
            &params,
            config.as_deref(),
            &out,
        ),
        Command::Explore { data, out, seed } => {
            commands::explore(&data.data, data.units(), data.from_positions, &out, seed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
