use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vbident_core::config::{ConfigError, RunConfig};
use vbident_core::pipeline::{run_all, Failure, PipelineError, Run, RunOptions, Stage, EXIT_CONFIG};

/// Identify a virtual-battery model of a thermostatically controlled load
/// ensemble from simulated tracking data.
#[derive(Debug, Parser)]
#[command(name = "vbident", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the ensemble under every regulation signal.
    Simulate(Flags),
    /// Train the stacked autoencoder on the simulated dataset.
    TrainSae(Flags),
    /// Grow a trained autoencoder to a larger ensemble and fine-tune it.
    Transfer(Flags),
    /// Train the state forecaster in two steps.
    TrainForecaster(Flags),
    /// Derive the battery parameters and write phi.json.
    Identify(Flags),
    /// Write plot-ready CSV reports.
    Report {
        #[command(flatten)]
        flags: Flags,
        /// Histogram bins for reconstruction errors.
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// All stages in order.
    Run(Flags),
}

#[derive(Debug, Args)]
struct Flags {
    /// Run configuration (JSON). Defaults to the one stored in the output directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Number of synthetic regulation signals.
    #[arg(long)]
    signals: Option<usize>,
    /// Epochs for this stage's training.
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate for this stage's training.
    #[arg(long)]
    lr: Option<f64>,
    /// Forecaster history window d.
    #[arg(long)]
    window: Option<usize>,
    /// SAE model to grow in `transfer`.
    #[arg(long)]
    source_model: Option<PathBuf>,
    /// Device count after growth in `transfer`.
    #[arg(long)]
    new_device_count: Option<usize>,
}

impl Command {
    fn flags(&self) -> &Flags {
        match self {
            Command::Simulate(f)
            | Command::TrainSae(f)
            | Command::Transfer(f)
            | Command::TrainForecaster(f)
            | Command::Identify(f)
            | Command::Run(f) => f,
            Command::Report { flags, .. } => flags,
        }
    }

    fn stage(&self) -> Stage {
        match self {
            Command::Simulate(_) | Command::Run(_) => Stage::Simulate,
            Command::TrainSae(_) => Stage::TrainSae,
            Command::Transfer(_) => Stage::Transfer,
            Command::TrainForecaster(_) => Stage::TrainForecaster,
            Command::Identify(_) => Stage::Identify,
            Command::Report { .. } => Stage::Report,
        }
    }
}

fn config_error(stage: Stage, e: ConfigError) -> PipelineError {
    PipelineError { stage, failure: Failure::Config(e) }
}

fn apply_overrides(cfg: &mut RunConfig, cmd: &Command) -> Result<(), ConfigError> {
    let f = cmd.flags();
    let run_all = matches!(cmd, Command::Run(_));
    if let Some(s) = f.seed {
        cfg.seed = s;
    }
    if let Some(n) = f.signals {
        cfg.signals.synthetic = n;
    }
    if let Some(w) = f.window {
        cfg.forecaster.window = w;
    }
    if let Some(n) = f.new_device_count {
        match cfg.transfer.as_mut() {
            Some(t) => t.new_device_count = n,
            None => {
                return Err(ConfigError::Invalid {
                    field: "transfer",
                    reason: "--new-device-count needs a transfer section".into(),
                })
            }
        }
    }
    match cmd {
        Command::TrainSae(_) | Command::Run(_) => {
            if let Some(e) = f.epochs {
                cfg.sae.epochs = e;
            }
            if let Some(lr) = f.lr {
                cfg.sae.learning_rate = Some(lr);
            }
        }
        Command::Transfer(_) => {
            if let (Some(e), Some(t)) = (f.epochs, cfg.transfer.as_mut()) {
                t.max_epochs = e;
            }
            if let Some(lr) = f.lr {
                cfg.sae.learning_rate = Some(lr);
            }
        }
        Command::TrainForecaster(_) => {
            if let Some(e) = f.epochs {
                cfg.forecaster.stage1.epochs = e;
            }
            if let Some(lr) = f.lr {
                cfg.forecaster.stage1.learning_rate = lr;
            }
        }
        _ => {}
    }
    if !run_all
        && (f.epochs.is_some() || f.lr.is_some())
        && matches!(cmd, Command::Simulate(_) | Command::Identify(_) | Command::Report { .. })
    {
        log::warn!("--epochs/--lr have no effect on this stage");
    }
    cfg.validate()
}

fn execute(cmd: &Command) -> Result<(), PipelineError> {
    let f = cmd.flags();
    let stage = cmd.stage();
    if let Some(w) = f.workers {
        if w == 0 {
            return Err(config_error(
                stage,
                ConfigError::Invalid { field: "--workers", reason: "must be at least 1".into() },
            ));
        }
        // Only fails if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let options = RunOptions { workers: f.workers, source_model: f.source_model.clone() };
    let mut config = match &f.config {
        Some(path) => RunConfig::load(path).map_err(|e| config_error(stage, e))?,
        None => Run::open(&f.out, options.clone())?.config,
    };
    apply_overrides(&mut config, cmd).map_err(|e| config_error(stage, e))?;
    let run = Run::create(&f.out, config, options)?;

    match cmd {
        Command::Simulate(_) => report_manifest(run.simulate()?),
        Command::TrainSae(_) => report_manifest(run.train_sae()?),
        Command::Transfer(_) => report_manifest(run.transfer()?),
        Command::TrainForecaster(_) => report_manifest(run.train_forecaster()?),
        Command::Identify(_) => print_phi(&run.identify()?),
        Command::Report { bins, .. } => report_manifest(run.report(*bins)?),
        Command::Run(_) => print_phi(&run_all(&run)?),
    }
    Ok(())
}

fn report_manifest(m: vbident_core::pipeline::Manifest) {
    for (path, hash) in &m.outputs {
        println!("{hash}  {path}");
    }
}

fn print_phi(phi: &vbident_core::vb::PhiFile) {
    match phi.to_json() {
        Ok(text) => print!("{text}"),
        Err(e) => log::error!("{e}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VBIDENT_LOG", "info")).init();
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            ExitCode::from(u8::try_from(code).unwrap_or(EXIT_CONFIG as u8))
        }
    }
}
