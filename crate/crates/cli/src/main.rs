//! `eslasso` command-line front-end.
//!
//! Exit codes: 0 success, 1 numerical or run failure, 2 usage or
//! configuration error.

mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "eslasso", version, about = "Penalized VaR/ES regression, simulations and CoES reports")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "eslasso-out")]
    pub out: PathBuf,

    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "ESLASSO_THREADS")]
    pub threads: Option<usize>,

    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Monte Carlo study of the penalized and unpenalized estimators.
    Simulate,
    /// Fit a quantile or ES regression to a CSV file.
    Fit {
        model: Model,
        /// Data CSV with a header row.
        #[arg(long)]
        data: PathBuf,
    },
    /// Cross-validation tables for a quantile or ES regression.
    Cv {
        model: Model,
        #[arg(long)]
        data: PathBuf,
    },
    /// CoES and DeltaCoES report on a panel CSV or a synthetic panel.
    Coes {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Empirical tail probabilities of block means against the fitted bound.
    Tailbound,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Quantile,
    Es,
}

/// Error with its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Run(_) => 1,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Run(e) => e,
        }
    }
}

impl From<eslasso::Error> for Failure {
    fn from(e: eslasso::Error) -> Self {
        if e.is_numerical() {
            Failure::Run(e.into())
        } else {
            Failure::Usage(e.into())
        }
    }
}

pub fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow::anyhow!("{msg}"))
}

/// Failure while writing results.
pub fn run_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Run(e.into())
}

/// Writes `name` under the output directory and records it.
pub struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, Failure> {
        std::fs::create_dir_all(dir)
            .map_err(|e| usage(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| run_err(anyhow::anyhow!("writing {}: {e}", path.display())))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(run_err)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_path: Option<String>,
    data_path: Option<String>,
    seed: Option<u64>,
    threads: usize,
    created: String,
    outputs: &'a [String],
    config: serde_json::Value,
}

pub struct Context<'a> {
    pub cli: &'a Cli,
    pub out: Outputs,
}

impl Context<'_> {
    pub fn log(&self, msg: impl std::fmt::Display) {
        if self.cli.verbose {
            eprintln!("[eslasso] {msg}");
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("thread pool: {e}")))?;
    }
    let mut ctx = Context {
        cli,
        out: Outputs::new(&cli.out)?,
    };
    let (name, data, (resolved, deferred)) = match &cli.command {
        Command::Simulate => ("simulate", None, commands::simulate(&mut ctx)?),
        Command::Fit { model, data } => ("fit", Some(data), commands::fit(&mut ctx, *model, data)?),
        Command::Cv { model, data } => ("cv", Some(data), commands::cv(&mut ctx, *model, data)?),
        Command::Coes { data } => ("coes", data.as_ref(), commands::coes(&mut ctx, data.as_deref())?),
        Command::Tailbound => ("tailbound", None, commands::tailbound(&mut ctx)?),
    };
    let manifest = Manifest {
        tool: "eslasso",
        version: env!("CARGO_PKG_VERSION"),
        command: name,
        config_path: cli.config.as_ref().map(|p| p.display().to_string()),
        data_path: data.map(|p| p.display().to_string()),
        seed: cli.seed,
        threads: rayon::current_num_threads(),
        created: chrono::Utc::now().to_rfc3339(),
        outputs: &ctx.out.written.clone(),
        config: resolved,
    };
    ctx.out.write_json("manifest.json", &manifest)?;
    ctx.log(format!("wrote {} files to {}", ctx.out.written.len(), cli.out.display()));
    deferred.map_or(Ok(()), Err)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
