//! End-to-end stages. Each stage reads its inputs from an output directory,
//! writes its artifacts under `<out>/<stage>/` and records a manifest of
//! input and output hashes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{derive_seed, ConfigError, RunConfig, Stream};
use crate::ensemble::{
    baseline_power, build_dataset, power_limits, simulate_many, Dataset, DatasetError, EnsembleError, EnsembleSpec,
};
use crate::forecaster::{
    closed_loop_rollout, downsample, make_supervised, rollout_rmse, supervised_from_series, train_stage1, train_stage2,
    ForecastError, ForecastModel,
};
use crate::io::{self, IoError};
use crate::net2net::{transfer, Net2NetError, TransferReport};
use crate::nn::{read_model_file, write_model_file, Extras, Network, NnError, TrainOutcome};
use crate::sae::{
    build_sae, center_biases, encode_dataset, reconstruction_errors, train_sae, SaeError, SaeTraining, VbStateSeries,
};
use crate::signals::{load_signal, scale_signal, synth_signal, RegulationSignal, SignalError};
use crate::vb::{identify, validate, Evidence, PhiFile, ValidationReport, VbError};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    TrainSae,
    Transfer,
    TrainForecaster,
    Identify,
    Report,
}

impl Stage {
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::TrainSae => "sae",
            Stage::Transfer => "transfer",
            Stage::TrainForecaster => "forecaster",
            Stage::Identify => "identify",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Simulate => "simulate",
            Stage::TrainSae => "train-sae",
            Stage::Transfer => "transfer",
            Stage::TrainForecaster => "train-forecaster",
            Stage::Identify => "identify",
            Stage::Report => "report",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Failure {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing input {0} (run the producing stage first)")]
    Missing(PathBuf),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sae(#[from] SaeError),
    #[error(transparent)]
    Net2Net(#[from] Net2NetError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Vb(#[from] VbError),
}

/// A failure tagged with the stage it occurred in.
#[derive(Debug, Error)]
#[error("{stage}: {failure}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub failure: Failure,
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_IDENTIFY: i32 = 5;

impl PipelineError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        let diverged = |e: &NnError| matches!(e, NnError::Diverged { .. });
        match &self.failure {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Nn(e) | Failure::Sae(SaeError::Nn(e)) | Failure::Forecast(ForecastError::Nn(e)) if diverged(e) => {
                EXIT_DIVERGED
            }
            Failure::Vb(_) => EXIT_IDENTIFY,
            _ => EXIT_DATA,
        }
    }
}

type StageResult<T> = Result<T, Failure>;

trait Tag<T> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T> Tag<T> for StageResult<T> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|failure| PipelineError { stage, failure })
    }
}

/// Reproducibility record of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub stage: Stage,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Per-invocation settings that are not part of the configuration.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub workers: Option<usize>,
    /// SAE to grow in `transfer`; defaults to the `train-sae` output.
    pub source_model: Option<PathBuf>,
}

impl RunOptions {
    fn workers(&self) -> usize {
        self.workers.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
    }
}

/// Output directory with the run's effective configuration.
#[derive(Debug, Clone)]
pub struct Run {
    pub out: PathBuf,
    pub config: RunConfig,
    pub options: RunOptions,
}

struct Paths;

impl Paths {
    const DATASET: &'static str = "dataset.vbds";
    const MODEL: &'static str = "model.vbnn";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub signal: String,
    pub steps: usize,
    pub failure_step: Option<usize>,
    pub max_error_kw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub devices: usize,
    pub baseline_kw: f64,
    pub total_rated_kw: f64,
    pub runs: Vec<RunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeRecord {
    pub devices: usize,
    pub learning_rate: f64,
    pub pretrain: Vec<Vec<f64>>,
    pub fine_tune: TrainOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub report: TransferReport,
    pub target_loss: f64,
    pub learning_rate: f64,
    pub transfer: TrainOutcome,
    pub scratch: Option<TrainOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecasterRecord {
    pub window: usize,
    pub dt_s: f64,
    pub training_windows: usize,
    pub stage1: TrainOutcome,
    pub stage2: TrainOutcome,
    /// Closed-loop RMSE on held-out runs, in raw code units.
    pub holdout_rmse_stage1: Option<f64>,
    pub holdout_rmse_stage2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub signal: String,
    pub report: ValidationReport,
}

fn require(path: &Path) -> StageResult<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Failure::Missing(path.to_path_buf()))
    }
}

fn load_model(path: &Path) -> StageResult<(Network, Extras)> {
    Ok(read_model_file(require(path)?)?)
}

fn load_dataset(path: &Path) -> StageResult<Dataset> {
    require(path)?;
    require(&io::sidecar_path(path))?;
    Ok(io::load_dataset(path)?)
}

fn read_record<T: serde::de::DeserializeOwned>(path: &Path) -> StageResult<T> {
    Ok(io::read_json(require(path)?)?)
}

impl Run {
    /// Fresh run: writes the effective configuration into `out`.
    pub fn create(out: impl Into<PathBuf>, config: RunConfig, options: RunOptions) -> Result<Self, PipelineError> {
        let out = out.into();
        let run = Self { out, config, options };
        run.config.validate().map_err(Failure::from).stage(Stage::Simulate)?;
        std::fs::create_dir_all(&run.out).map_err(|e| Failure::Io(io::io_err(&run.out)(e))).stage(Stage::Simulate)?;
        std::fs::write(run.out.join(RUN_CONFIG_FILE), run.config.to_json())
            .map_err(|e| Failure::Io(io::io_err(&run.out)(e)))
            .stage(Stage::Simulate)?;
        Ok(run)
    }

    /// Continue a run from the configuration stored in `out`.
    pub fn open(out: impl Into<PathBuf>, options: RunOptions) -> Result<Self, PipelineError> {
        let out = out.into();
        let path = out.join(RUN_CONFIG_FILE);
        let config =
            (|| -> StageResult<RunConfig> { Ok(RunConfig::load(require(&path)?)?) })().stage(Stage::Simulate)?;
        Ok(Self { out, config, options })
    }

    fn dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.dir())
    }

    fn path(&self, stage: Stage, file: &str) -> PathBuf {
        self.dir(stage).join(file)
    }

    /// Stage whose SAE and dataset describe the identified ensemble.
    pub fn target_stage(&self) -> Stage {
        if self.config.transfer.is_some() {
            Stage::Transfer
        } else {
            Stage::TrainSae
        }
    }

    fn target_dataset_path(&self) -> PathBuf {
        match self.target_stage() {
            Stage::Transfer => self.path(Stage::Transfer, Paths::DATASET),
            _ => self.path(Stage::Simulate, Paths::DATASET),
        }
    }

    fn prepare(&self, stage: Stage) -> StageResult<PathBuf> {
        let dir = self.dir(stage);
        std::fs::create_dir_all(&dir).map_err(io::io_err(&dir))?;
        Ok(dir)
    }

    fn manifest(&self, stage: Stage, inputs: &[PathBuf], outputs: &[PathBuf]) -> StageResult<Manifest> {
        let hash_all = |paths: &[PathBuf]| -> StageResult<BTreeMap<String, String>> {
            paths
                .iter()
                .map(|p| {
                    let key = p.strip_prefix(&self.out).unwrap_or(p).to_string_lossy().replace('\\', "/");
                    Ok((key, io::sha256_file(p)?))
                })
                .collect()
        };
        let m = Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            stage,
            seed: self.config.seed,
            config_sha256: io::sha256_hex(self.config.to_json().as_bytes()),
            inputs: hash_all(inputs)?,
            outputs: hash_all(outputs)?,
        };
        io::write_json(self.path(stage, "manifest.json"), &m)?;
        Ok(m)
    }

    fn signals(&self, rated_power: f64) -> StageResult<Vec<RegulationSignal>> {
        let cfg = &self.config;
        let sim = &cfg.simulation;
        let mut out = Vec::new();
        for path in &cfg.signals.files {
            let s = load_signal(path, cfg.signals.file_dt)?;
            if s.dt != sim.dt_s {
                return Err(Failure::Data(format!(
                    "{} is sampled every {} s, simulation uses {} s",
                    path.display(),
                    s.dt,
                    sim.dt_s
                )));
            }
            out.push(if s.normalized { scale_signal(&s, rated_power, cfg.signals.scale_fraction)? } else { s });
        }
        let base = derive_seed(cfg.seed, Stream::Signals);
        for k in 0..cfg.signals.synthetic {
            let s = synth_signal(base.wrapping_add(k as u64), sim.horizon_s, sim.dt_s, cfg.signals.bandwidth)?;
            out.push(scale_signal(&s, rated_power, cfg.signals.scale_fraction)?);
        }
        Ok(out)
    }

    fn simulate_spec(&self, spec: &EnsembleSpec) -> StageResult<(Dataset, SimulationRecord)> {
        let sim = &self.config.simulation;
        let ensemble = spec.build()?;
        let signals = self.signals(ensemble.total_rated_power())?;
        let steps = (sim.horizon_s / sim.dt_s).round() as usize;
        let baseline = baseline_power(&ensemble, steps, sim.dt_s)?;
        let trajectories = simulate_many(&ensemble, &signals, baseline, self.options.workers())?;
        let runs = trajectories
            .iter()
            .map(|t| RunSummary {
                signal: t.signal_tag.clone(),
                steps: t.steps(),
                failure_step: t.failure_step,
                max_error_kw: t.errors.iter().fold(0.0, |m: f64, e| m.max(*e)),
            })
            .collect();
        let dataset = build_dataset(&trajectories, &ensemble)?.subsample(sim.stride)?;
        let record = SimulationRecord {
            devices: ensemble.len(),
            baseline_kw: baseline,
            total_rated_kw: ensemble.total_rated_power(),
            runs,
        };
        Ok((dataset, record))
    }

    /// Simulate the configured ensemble under every signal.
    pub fn simulate(&self) -> Result<Manifest, PipelineError> {
        let stage = Stage::Simulate;
        (|| {
            self.prepare(stage)?;
            let (dataset, record) = self.simulate_spec(&self.config.ensemble_spec())?;
            log::info!("simulated {} rows x {} columns", dataset.rows, dataset.cols);
            let data = self.path(stage, Paths::DATASET);
            io::save_dataset(&dataset, &data)?;
            let runs = self.path(stage, "trajectories.json");
            io::write_json(&runs, &record)?;
            self.manifest(stage, &[], &[data.clone(), io::sidecar_path(&data), runs])
        })()
        .stage(stage)
    }

    fn sae_training(&self, data: &[f64], cols: usize, epochs: usize, stream: Stream) -> SaeTraining {
        let s = &self.config.sae;
        SaeTraining {
            epochs,
            learning_rate: s.learning_rate.unwrap_or_else(|| SaeTraining::scaled_learning_rate(data, cols, s.lr_gain)),
            batch_size: s.batch_size,
            seed: derive_seed(self.config.seed, stream),
            pretrain_fraction: s.pretrain_fraction,
            target_loss: None,
        }
    }

    /// Train the SAE on the simulated dataset.
    pub fn train_sae(&self) -> Result<Manifest, PipelineError> {
        let stage = Stage::TrainSae;
        (|| {
            let data_path = self.path(Stage::Simulate, Paths::DATASET);
            let dataset = load_dataset(&data_path)?;
            self.prepare(stage)?;
            let mut net = build_sae(dataset.cols, derive_seed(self.config.seed, Stream::Sae))?;
            if self.config.sae.center_biases {
                center_biases(&mut net, &dataset.data)?;
            }
            let cfg = self.sae_training(&dataset.data, dataset.cols, self.config.sae.epochs, Stream::Sae);
            let outcome = train_sae(&mut net, &dataset.data, &cfg)?;
            log::info!("sae final loss {:.6e} after {} epochs", outcome.fine_tune.final_loss(), cfg.epochs);
            let mut extras = Extras::new();
            extras.insert("final_loss".into(), vec![outcome.fine_tune.final_loss()]);
            let model = self.path(stage, Paths::MODEL);
            write_model_file(&model, &net, &extras)?;
            let record = SaeRecord {
                devices: dataset.layout.devices,
                learning_rate: cfg.learning_rate,
                pretrain: outcome.pretrain,
                fine_tune: outcome.fine_tune,
            };
            let history = self.path(stage, "history.json");
            io::write_json(&history, &record)?;
            self.manifest(stage, &[data_path.clone(), io::sidecar_path(&data_path)], &[model, history])
        })()
        .stage(stage)
    }

    /// Grow a trained SAE to the enlarged ensemble and fine-tune it until it
    /// matches the source's final loss.
    pub fn transfer(&self) -> Result<Manifest, PipelineError> {
        let stage = Stage::Transfer;
        (|| {
            let spec = self.config.transfer.as_ref().ok_or_else(|| {
                Failure::Config(ConfigError::Invalid { field: "transfer", reason: "no transfer section".into() })
            })?;
            let source_path =
                self.options.source_model.clone().unwrap_or_else(|| self.path(Stage::TrainSae, Paths::MODEL));
            let (source, extras) = load_model(&source_path)?;
            let target_loss = match extras.get("final_loss").map(Vec::as_slice) {
                Some(&[l]) => l,
                _ => return Err(Failure::Data(format!("{} has no final_loss", source_path.display()))),
            };
            self.prepare(stage)?;
            let (dataset, record) = self.simulate_spec(&self.config.target_spec())?;
            let data_path = self.path(stage, Paths::DATASET);
            io::save_dataset(&dataset, &data_path)?;
            let runs_path = self.path(stage, "trajectories.json");
            io::write_json(&runs_path, &record)?;

            let (mut net, report) = transfer(&source, dataset.cols, derive_seed(self.config.seed, Stream::Transfer))?;
            if self.config.sae.center_biases {
                center_biases(&mut net, &dataset.data)?;
            }
            let mut cfg = self.sae_training(&dataset.data, dataset.cols, spec.max_epochs, Stream::Transfer);
            cfg.target_loss = Some(target_loss);
            let outcome = train_sae(&mut net, &dataset.data, &cfg)?;
            log::info!("transfer reached {target_loss:.6e} at epoch {:?}", outcome.fine_tune.reached_target);

            let scratch = if spec.compare_scratch {
                let mut fresh = build_sae(dataset.cols, derive_seed(self.config.seed, Stream::Scratch))?;
                if self.config.sae.center_biases {
                    center_biases(&mut fresh, &dataset.data)?;
                }
                let scfg = SaeTraining { seed: derive_seed(self.config.seed, Stream::Scratch), ..cfg };
                let o = train_sae(&mut fresh, &dataset.data, &scfg)?;
                log::info!("scratch reached {target_loss:.6e} at epoch {:?}", o.fine_tune.reached_target);
                Some(o.fine_tune)
            } else {
                None
            };

            let mut out_extras = Extras::new();
            out_extras.insert("final_loss".into(), vec![outcome.fine_tune.final_loss()]);
            let model = self.path(stage, Paths::MODEL);
            write_model_file(&model, &net, &out_extras)?;
            let rec = TransferRecord {
                report,
                target_loss,
                learning_rate: cfg.learning_rate,
                transfer: outcome.fine_tune,
                scratch,
            };
            let rec_path = self.path(stage, "report.json");
            io::write_json(&rec_path, &rec)?;
            self.manifest(
                stage,
                &[source_path],
                &[data_path.clone(), io::sidecar_path(&data_path), runs_path, model, rec_path],
            )
        })()
        .stage(stage)
    }

    fn encoded_target(&self) -> StageResult<(Network, Dataset, Vec<VbStateSeries>, [PathBuf; 3])> {
        let model_path = self.path(self.target_stage(), Paths::MODEL);
        let (net, _) = load_model(&model_path)?;
        let data_path = self.target_dataset_path();
        let dataset = load_dataset(&data_path)?;
        let series = encode_dataset(&net, &dataset)?;
        let side = io::sidecar_path(&data_path);
        Ok((net, dataset, series, [model_path, data_path, side]))
    }

    fn split_runs<'a>(&self, series: &'a [VbStateSeries]) -> (&'a [VbStateSeries], &'a [VbStateSeries]) {
        let hold = self.config.signals.holdout.min(series.len());
        series.split_at(series.len() - hold)
    }

    /// Two-step forecaster training on the encoded target dataset.
    pub fn train_forecaster(&self) -> Result<Manifest, PipelineError> {
        let stage = Stage::TrainForecaster;
        (|| {
            let (_, _, series, inputs) = self.encoded_target()?;
            self.prepare(stage)?;
            let fc = &self.config.forecaster;
            let series: Vec<VbStateSeries> = series.iter().map(|s| downsample(s, fc.stride)).collect();
            let (train_runs, holdout) = self.split_runs(&series);
            let set = supervised_from_series(train_runs, fc.window)?;
            let mut model = ForecastModel::new(&set, &fc.arch, derive_seed(self.config.seed, Stream::Forecaster))?;
            let stage1 = train_stage1(&mut model, &set, &self.config.stage_train(&fc.stage1, Stream::Forecaster, 1))?;
            let first = model.clone();
            let rollout = closed_loop_rollout(&model, &set)?;
            let stage2 =
                train_stage2(&mut model, &rollout, &self.config.stage_train(&fc.stage2, Stream::Forecaster, 2))?;

            let hold = supervised_from_series(holdout, fc.window).ok();
            let rmse = |m: &ForecastModel| -> StageResult<Option<f64>> {
                match &hold {
                    Some(h) => Ok(Some(rollout_rmse(&closed_loop_rollout(m, h)?, h))),
                    None => Ok(None),
                }
            };
            let record = ForecasterRecord {
                window: fc.window,
                dt_s: set.dt,
                training_windows: set.len(),
                stage1,
                stage2,
                holdout_rmse_stage1: rmse(&first)?,
                holdout_rmse_stage2: rmse(&model)?,
            };
            log::info!(
                "forecaster held-out closed-loop rmse {:?} -> {:?}",
                record.holdout_rmse_stage1,
                record.holdout_rmse_stage2
            );
            let model_path = self.path(stage, Paths::MODEL);
            write_model_file(&model_path, &model.net, &model.extras())?;
            let history = self.path(stage, "history.json");
            io::write_json(&history, &record)?;
            self.manifest(stage, &inputs, &[model_path, history])
        })()
        .stage(stage)
    }

    /// Derive `phi` and validate it on the held-out runs.
    pub fn identify(&self) -> Result<PhiFile, PipelineError> {
        let stage = Stage::Identify;
        (|| {
            let (_, _, series, inputs) = self.encoded_target()?;
            let fc_path = self.path(Stage::TrainForecaster, Paths::MODEL);
            let (fnet, fextras) = load_model(&fc_path)?;
            let model = ForecastModel::from_parts(fnet, &fextras)?;
            self.prepare(stage)?;

            let fc = &self.config.forecaster;
            let mut rollouts = Vec::new();
            for s in series.iter().filter(|s| s.failure_step.is_none()) {
                let s = downsample(s, fc.stride);
                if s.x.len() <= model.d.max(1) {
                    continue;
                }
                let set = make_supervised(&s.x, &s.u[..s.x.len()], model.d, s.dt)?;
                let r = closed_loop_rollout(&model, &set)?;
                let mut x = Vec::with_capacity(s.x.len());
                x.push(s.x[0]);
                x.extend_from_slice(&r.beta);
                rollouts.push(VbStateSeries { x, ..s });
            }

            let ensemble = self.config.target_spec().build()?;
            let sim = &self.config.simulation;
            let steps = (self.config.identify.limit_horizon_s / sim.dt_s).round() as usize;
            let shape = RegulationSignal::constant(1.0, steps, sim.dt_s);
            let power = power_limits(&ensemble, &shape, &self.config.limit_search())?;
            let phi =
                identify(&Evidence { encoded: &series, rollouts: &rollouts, power }, &self.config.identify_config())?;
            let phi_path = self.path(stage, "phi.json");
            phi.store(&phi_path)?;

            let (_, holdout) = self.split_runs(&series);
            let scale = phi.diagnostics.state_scale;
            let validation: Vec<ValidationRecord> = holdout
                .iter()
                .map(|s| {
                    let truth: Vec<f64> = s.x.iter().map(|v| v * scale).collect();
                    let report = validate(&phi.params(), &s.u, s.dt, &truth)?;
                    Ok(ValidationRecord { signal: s.signal.clone(), report })
                })
                .collect::<StageResult<_>>()?;
            let val_path = self.path(stage, "validation.json");
            io::write_json(&val_path, &validation)?;
            let mut all_inputs = inputs.to_vec();
            all_inputs.push(fc_path);
            self.manifest(stage, &all_inputs, &[phi_path, val_path])?;
            Ok(phi)
        })()
        .stage(stage)
    }

    /// Plot-ready data: reconstruction-error histograms, loss curves, epoch
    /// comparison and the encoded state series.
    pub fn report(&self, bins: usize) -> Result<Manifest, PipelineError> {
        let stage = Stage::Report;
        (|| {
            let (net, dataset, series, inputs) = self.encoded_target()?;
            let dir = self.prepare(stage)?;
            let mut outputs = Vec::new();

            let errors = reconstruction_errors(&net, &dataset, 1)?;
            let hist = errors.histogram(bins);
            let mut header = vec!["bin_low".to_string(), "bin_high".to_string()];
            header.extend((1..=hist.counts.len()).map(|i| format!("device{i}")));
            let nb = hist.edges.len() - 1;
            let mut rows = Vec::with_capacity(nb * header.len());
            for b in 0..nb {
                rows.push(hist.edges[b]);
                rows.push(hist.edges[b + 1]);
                rows.extend(hist.counts.iter().map(|c| c[b] as f64));
            }
            let path = dir.join("reconstruction_histogram.csv");
            write_csv(&path, &header, &rows)?;
            outputs.push(path);

            let mut curves = Vec::new();
            let mut push_curve = |name: &str, o: &TrainOutcome| {
                curves.push((name.to_string(), 0, o.initial_loss));
                curves.extend(o.history.iter().enumerate().map(|(e, &l)| (name.to_string(), e + 1, l)));
            };
            let sae_hist = self.path(Stage::TrainSae, "history.json");
            if sae_hist.is_file() {
                let r: SaeRecord = read_record(&sae_hist)?;
                push_curve("sae", &r.fine_tune);
            }
            let transfer_path = self.path(Stage::Transfer, "report.json");
            let transfer_rec: Option<TransferRecord> =
                if transfer_path.is_file() { Some(read_record(&transfer_path)?) } else { None };
            if let Some(t) = &transfer_rec {
                push_curve("transfer", &t.transfer);
                if let Some(s) = &t.scratch {
                    push_curve("scratch", s);
                }
            }
            let fc_hist = self.path(Stage::TrainForecaster, "history.json");
            if fc_hist.is_file() {
                let r: ForecasterRecord = read_record(&fc_hist)?;
                push_curve("forecaster_stage1", &r.stage1);
                push_curve("forecaster_stage2", &r.stage2);
            }
            let path = dir.join("loss_curves.csv");
            let mut w = csv::Writer::from_path(&path).map_err(IoError::from)?;
            w.write_record(["curve", "epoch", "loss"]).map_err(IoError::from)?;
            for (name, epoch, loss) in &curves {
                w.write_record([name.clone(), epoch.to_string(), loss.to_string()]).map_err(IoError::from)?;
            }
            w.flush().map_err(io::io_err(&path))?;
            outputs.push(path);

            if let Some(t) = &transfer_rec {
                let path = dir.join("epochs.csv");
                let mut w = csv::Writer::from_path(&path).map_err(IoError::from)?;
                w.write_record([
                    "method",
                    "devices",
                    "pretrained_parameters",
                    "untrained_parameters",
                    "target_loss",
                    "epochs_to_target",
                ])
                .map_err(IoError::from)?;
                let fmt_epochs = |e: Option<usize>| e.map(|v| v.to_string()).unwrap_or_else(|| "not reached".into());
                let total = t.report.pretrained_parameters + t.report.untrained_parameters;
                w.write_record([
                    "transfer".to_string(),
                    t.report.target_devices.to_string(),
                    t.report.pretrained_parameters.to_string(),
                    t.report.untrained_parameters.to_string(),
                    t.target_loss.to_string(),
                    fmt_epochs(t.transfer.reached_target),
                ])
                .map_err(IoError::from)?;
                if let Some(s) = &t.scratch {
                    w.write_record([
                        "scratch".to_string(),
                        t.report.target_devices.to_string(),
                        "0".to_string(),
                        total.to_string(),
                        t.target_loss.to_string(),
                        fmt_epochs(s.reached_target),
                    ])
                    .map_err(IoError::from)?;
                }
                w.flush().map_err(io::io_err(&path))?;
                outputs.push(path);
            }

            let path = dir.join("vb_state.csv");
            let mut w = csv::Writer::from_path(&path).map_err(IoError::from)?;
            w.write_record(["signal", "step", "time_s", "code", "regulation_kw"]).map_err(IoError::from)?;
            for s in &series {
                for (k, (x, u)) in s.x.iter().zip(&s.u).enumerate() {
                    w.write_record([
                        s.signal.clone(),
                        k.to_string(),
                        (k as f64 * s.dt).to_string(),
                        x.to_string(),
                        u.to_string(),
                    ])
                    .map_err(IoError::from)?;
                }
            }
            w.flush().map_err(io::io_err(&path))?;
            outputs.push(path);

            self.manifest(stage, &inputs, &outputs)
        })()
        .stage(stage)
    }
}

fn write_csv(path: &Path, header: &[String], data: &[f64]) -> StageResult<()> {
    let file = std::fs::File::create(path).map_err(io::io_err(path))?;
    let cols = header.len();
    io::write_matrix_csv(file, header, data.len() / cols, cols, data)?;
    Ok(())
}

/// Every stage in order.
pub fn run_all(run: &Run) -> Result<PhiFile, PipelineError> {
    run.simulate()?;
    run.train_sae()?;
    if run.config.transfer.is_some() {
        run.transfer()?;
    }
    run.train_forecaster()?;
    let phi = run.identify()?;
    run.report(20)?;
    Ok(phi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::from_json(include_str!("../../../configs/desk.json")).unwrap();
        c.ensemble.count = 4;
        c.signals.synthetic = 2;
        c.simulation.horizon_s = 1200.0;
        c.simulation.stride = 20;
        c.sae.epochs = 3;
        c.transfer = None;
        c.forecaster.window = 3;
        c.forecaster.stage1.epochs = 2;
        c.forecaster.stage2.epochs = 1;
        c.forecaster.arch.lstm_units = 4;
        c.identify.limit_horizon_s = 300.0;
        c.identify.limit_tolerance = 1.0;
        c
    }

    #[test]
    fn missing_sae_is_a_data_error_naming_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::create(dir.path(), tiny(), RunOptions::default()).unwrap();
        let err = run.identify().unwrap_err();
        assert_eq!(err.exit_code(), EXIT_DATA);
        assert!(err.to_string().contains("model.vbnn"), "{err}");
    }

    #[test]
    fn stages_write_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::create(dir.path(), tiny(), RunOptions { workers: Some(2), ..Default::default() }).unwrap();
        let m = run.simulate().unwrap();
        assert!(m.outputs.contains_key("simulate/dataset.vbds"));
        let m = run.train_sae().unwrap();
        assert_eq!(m.inputs.len(), 2);
        run.train_forecaster().unwrap();
        let reopened = Run::open(dir.path(), RunOptions::default()).unwrap();
        assert_eq!(reopened.config, run.config);
        match reopened.identify() {
            Ok(phi) => phi.params().check().unwrap(),
            Err(e) => assert_eq!(e.exit_code(), EXIT_IDENTIFY, "{e}"),
        }
    }
}
