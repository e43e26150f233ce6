//! Virtual-battery identification for ensembles of thermostatically
//! controlled loads.
//!
//! The modules follow the data flow of the pipeline:
//!
//! - [`tcl`]: hybrid dynamics of single air conditioners and water heaters.
//! - [`signals`]: regulation signals (CSV ingest, synthesis, scaling).
//! - [`ensemble`]: ensemble tracking simulation, dataset assembly and power limits.
//! - [`nn`]: dense, conv1d, max-pool and LSTM layers with backpropagation and SGD.
//! - [`sae`]: stacked autoencoder whose width-1 code is the virtual-battery state.
//! - [`net2net`]: function-preserving widening and deepening, and SAE transfer.
//! - [`forecaster`]: conv/LSTM state forecaster with two-stage training.
//! - [`vb`]: virtual-battery parameter identification and validation.
//! - [`io`], [`config`], [`pipeline`]: artifacts, run configuration and stages.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod ensemble;
pub mod forecaster;
pub mod io;
pub mod net2net;
pub mod nn;
pub mod pipeline;
pub mod sae;
pub mod signals;
pub mod tcl;
pub mod vb;

pub use config::RunConfig;
pub use ensemble::{Dataset, Ensemble, EnsembleSpec};
pub use nn::Network;
pub use pipeline::{run_all, PipelineError, Run, RunOptions, Stage};
pub use signals::RegulationSignal;
pub use vb::{PhiFile, VbParams};
