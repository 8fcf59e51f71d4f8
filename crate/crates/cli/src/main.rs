mod commands;
mod run;
mod spec;

use std::fmt;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use actmon_core::synth::{MockModel, MockModelSpec};
use clap::{Parser, Subcommand};
use serde_json::json;

use commands::Context;
use run::RunDir;

#[derive(Parser)]
#[command(name = "actmon", version, about = "Activation probing experiments from a run config")]
struct Cli {
    /// Run configuration (strict JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; every output lands here.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Worker threads for capture and sweep cells.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Inference service base URL; overrides the config.
    #[arg(long, global = true, env = actmon_harness::ENDPOINT_ENV)]
    endpoint: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Import a dataset manifest plus optional shards and logits.
    Ingest,
    /// Generate a synthetic dataset.
    Synth,
    /// Render prompts and collect activations and yes/no logits.
    Capture,
    /// Train TopK sparse autoencoders on captured shards.
    TrainSae,
    /// Fit JumpReLU thresholds on stored shards.
    Calibrate,
    /// Write SAE feature shards.
    Encode,
    /// Fit logistic probes and store them.
    TrainProbe,
    /// Fit unsupervised LAT directions.
    Latscan,
    /// Fit stacked classifiers over stored probes.
    Stack,
    /// Sweep one axis (train size, layer, Q, C or few-shot count).
    Sweep,
    /// Train in distribution and score in and out of distribution.
    Generalize,
    /// Rebuild report.csv from stored artifacts.
    Report,
    /// Serve the mock model over HTTP until interrupted.
    ServeMock {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(Vec<String>),
    Core(actmon_core::Error),
}

impl CliError {
    fn class(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Core(e) => e.class(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            CliError::Config(problems) => problems.join("; "),
            CliError::Core(e) => e.to_string(),
        };
        write!(f, "error[{}]: {}", self.class(), msg.replace(['\n', '\r'], " "))
    }
}

impl From<actmon_core::Error> for CliError {
    fn from(e: actmon_core::Error) -> Self {
        CliError::Core(e)
    }
}

fn serve_mock(cli: &Cli, addr: SocketAddr) -> Result<(), CliError> {
    let spec = match &cli.config {
        Some(path) => {
            let loaded = spec::load(path).map_err(CliError::Config)?;
            loaded.spec.capture.and_then(|c| c.mock).unwrap_or_default()
        }
        None => MockModelSpec::default(),
    };
    eprintln!("serving mock model on http://{addr}");
    actmon_harness::serve_blocking(MockModel::new(spec)?, addr)?;
    Ok(())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Config(vec!["--workers must be positive".into()]));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Core(actmon_core::Error::Invalid(e.to_string())))?;
    }
    if let Command::ServeMock { addr } = cli.command {
        return serve_mock(&cli, addr);
    }
    let run = RunDir::new(&cli.out)?;
    if cli.command == Command::Report && cli.config.is_none() {
        let path = commands::report(&run)?;
        println!("{}", path.display());
        return Ok(());
    }
    let config = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config(vec!["--config is required".into()]))?;
    let mut loaded = spec::load(config).map_err(CliError::Config)?;
    if let Some(seed) = cli.seed {
        loaded.spec.seed = seed;
    }
    let endpoint = cli.endpoint.clone().or_else(|| loaded.spec.endpoint.clone());
    if let Some(e) = &endpoint {
        loaded.spec.endpoint = Some(e.clone());
    }
    let hash = loaded.hash();
    let ctx = Context {
        spec: loaded,
        run,
        hash,
        endpoint,
    };
    match cli.command {
        Command::Ingest => ctx.ingest(),
        Command::Synth => ctx.synth(),
        Command::Capture => ctx.capture(),
        Command::TrainSae => ctx.train_sae(),
        Command::Calibrate => ctx.calibrate(),
        Command::Encode => ctx.encode(),
        Command::TrainProbe => ctx.train_probe(),
        Command::Latscan => ctx.latscan(),
        Command::Stack => ctx.stack(),
        Command::Sweep => ctx.sweep(),
        Command::Generalize => ctx.generalize(),
        Command::Report => {
            let path = commands::report(&ctx.run)?;
            ctx.run
                .record_stage("report", &ctx.hash, json!({}), std::slice::from_ref(&path))?;
            println!("{}", path.display());
            Ok(())
        }
        Command::ServeMock { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
