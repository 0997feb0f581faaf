use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use micromacro::experiments::run_experiment;
use micromacro::{load_config, Error, ExperimentKind, ExperimentSpec};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "micromacro", version, about = "Micro-macro acceleration experiments for FENE dumbbells")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Match snapshots of a microscopic run to later moments.
    Snapshot(Common),
    /// Accelerated runs against the microscopic reference.
    Accelerate(Common),
    /// Plain microscopic reference runs.
    Reference(Common),
    /// Weak-order and extrapolation-order study on the OU process.
    Converge(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment file, or an artifact whose header holds one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
}

impl Command {
    fn parts(&self) -> (&Common, &'static [ExperimentKind]) {
        match self {
            Command::Snapshot(c) => (
                c,
                &[
                    ExperimentKind::SnapshotMatching,
                    ExperimentKind::MomentErrorVsL,
                    ExperimentKind::StressErrorVsDt,
                ],
            ),
            Command::Accelerate(c) => (c, &[ExperimentKind::FullAcceleration]),
            Command::Reference(c) => (c, &[ExperimentKind::ReferenceRun]),
            Command::Converge(c) => (c, &[ExperimentKind::ConvergenceStudy]),
        }
    }
}

fn build_spec(args: &Common, kinds: &[ExperimentKind]) -> Result<ExperimentSpec, Error> {
    let mut spec = match &args.config {
        Some(path) => load_config(path)?,
        None => ExperimentSpec::new(kinds[0]),
    };
    if !kinds.contains(&spec.kind) {
        return Err(Error::Config(format!(
            "experiment kind {:?} does not belong to this subcommand",
            spec.kind
        )));
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(out) = &args.out {
        spec.output_dir = out.clone();
    }
    if let Some(r) = args.replicates {
        spec.replicates = r;
    }
    spec.resolve();
    spec.validate()?;
    Ok(spec)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Serialize(_) | Error::DimensionMismatch { .. } => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (args, kinds) = cli.command.parts();

    let spec = match build_spec(args, kinds) {
        Ok(s) => s,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    info!("running {:?} with seed {} and {} replicates", spec.kind, spec.seed, spec.replicates);

    match run_experiment(&spec) {
        Ok(out) => {
            for f in &out.files {
                println!("{}", f.display());
            }
            if out.aborted > 0 {
                warn!("{} of {} replicates aborted", out.aborted, out.replicates);
            }
            if out.replicates > 0 && out.aborted == out.replicates {
                eprintln!("error: every replicate aborted");
                return ExitCode::from(EXIT_NUMERICAL);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
