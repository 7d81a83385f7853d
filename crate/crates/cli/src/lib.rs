//! Batch front end: builds an [`ExperimentConfig`] from a JSON file and
//! flags, runs it and writes the report.

pub mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{run, Failure};
pub use config::{validate, Command, ExperimentConfig, Format};
pub use report::{Check, Report};

pub const SEED_ENV: &str = "ERRLAB_SEED";

#[derive(Debug, Parser)]
#[command(name = "errlab", version, about = "Error calculus experiments")]
pub struct Cli {
    /// JSON configuration; flags given on the command line take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: CommandArgs,
}

#[derive(Debug, Subcommand)]
pub enum CommandArgs {
    /// Push a value with bias and covariance through a smooth map.
    Propagate(ExperimentConfig),
    /// Gauss propagation through a rotation and back.
    GaussDemo(ExperimentConfig),
    /// Naive error bounds through a rotation and back.
    NaiveDemo(ExperimentConfig),
    /// Error moments of an approximation scheme.
    Simulate(ExperimentConfig),
    /// The four weak bias operators of a scheme.
    BiasOps(ExperimentConfig),
    /// Fisher information and the identified Γ[I].
    Fisher(ExperimentConfig),
    /// Generator, symmetry and diffusion checks of an error structure.
    StructureCheck(ExperimentConfig),
}

impl CommandArgs {
    fn split(self) -> (Command, ExperimentConfig) {
        match self {
            Self::Propagate(c) => (Command::Propagate, c),
            Self::GaussDemo(c) => (Command::GaussDemo, c),
            Self::NaiveDemo(c) => (Command::NaiveDemo, c),
            Self::Simulate(c) => (Command::Simulate, c),
            Self::BiasOps(c) => (Command::BiasOps, c),
            Self::Fisher(c) => (Command::Fisher, c),
            Self::StructureCheck(c) => (Command::StructureCheck, c),
        }
    }
}

/// Merges file, flags and the seed fallback into one configuration.
pub fn resolve(cli: Cli, env_seed: Option<String>) -> Result<ExperimentConfig, Failure> {
    let (command, mut flags) = cli.command.split();
    flags.command = Some(command);
    let base = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path).map_err(|e| Failure::Invalid(vec![e]))?,
        None => ExperimentConfig::default(),
    };
    if base.command.is_some_and(|c| c != command) {
        return Err(Failure::Invalid(vec![format!(
            "config file is for {}, not {}",
            base.command.map_or("", Command::name),
            command.name()
        )]));
    }
    let mut config = base.overlay(&flags);
    if config.seed.is_none() {
        if let Some(s) = env_seed {
            let seed = s.trim().parse().map_err(|_| {
                Failure::Invalid(vec![format!(
                    "{SEED_ENV}={s} is not a 64-bit unsigned seed"
                )])
            })?;
            config.seed = Some(seed);
        }
    }
    Ok(config)
}

/// Runs `config` and writes its report, returning the process exit code.
pub fn execute(config: &ExperimentConfig, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let outcome = match config.threads {
        Some(t) if t > 0 => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| run(config)),
            Err(e) => Err(Failure::Numerical(format!("cannot start {t} threads: {e}"))),
        },
        _ => run(config),
    };
    let report = match outcome {
        Ok(r) => r,
        Err(f) => {
            match &f {
                Failure::Invalid(v) => {
                    for line in v {
                        let _ = writeln!(stderr, "invalid configuration: {line}");
                    }
                }
                Failure::Numerical(m) => {
                    let _ = writeln!(stderr, "numerical failure: {m}");
                }
            }
            return f.exit_code();
        }
    };
    let body = match (config.format(), &report.csv) {
        (Format::Csv, Some(csv)) => csv.clone(),
        _ => report.to_json(),
    };
    match &config.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, body) {
                let _ = writeln!(stderr, "cannot write {}: {e}", path.display());
                return 1;
            }
            let _ = writeln!(stdout, "input_hash {}", report.input_hash);
            for line in report.lines() {
                let _ = writeln!(stdout, "{line}");
            }
        }
        None => {
            let _ = stdout.write_all(body.as_bytes());
            if config.format() == Format::Csv {
                for line in report.lines() {
                    let _ = writeln!(stderr, "{line}");
                }
            }
        }
    }
    0
}

/// Entry point shared by the binary and the tests.
pub fn main_with<I, T>(
    args: I,
    env_seed: Option<String>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 {
                write!(stdout, "{e}")
            } else {
                write!(stderr, "{e}")
            };
            return code;
        }
    };
    match resolve(cli, env_seed) {
        Ok(config) => execute(&config, stdout, stderr),
        Err(f) => {
            if let Failure::Invalid(v) = &f {
                for line in v {
                    let _ = writeln!(stderr, "invalid configuration: {line}");
                }
            }
            f.exit_code()
        }
    }
}
