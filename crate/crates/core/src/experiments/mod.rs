//! Experiment drivers behind the `mpf` CLI: configuration, model builders,
//! filter kernels, single runs, delta sweeps, the empirical convergence
//! harness, and CSV/SVG emission.

pub mod config;
pub mod kernels;
pub mod models;
pub mod plots;
pub mod prop1;
pub mod run;
pub mod sweep;

pub use config::{ExperimentConfig, FilterId, ModelId, Prop1Settings};
pub use kernels::{run_filter, MarginalCloud, RunOutput};
pub use models::{build_model, lgm_matrices, DiffusionModel, DiscreteModel, ModelBundle};
pub use plots::emit_plots;
pub use prop1::{prop1_gap_harness, prop1_to_dir, Prop1Config, Prop1Result, Prop1Row};
pub use run::{config_hash, run_experiment, run_experiment_to_dir, runrecord_csv, RunRecord};
pub use sweep::{sweep_delta, sweep_to_dir, SweepResult, SweepRow};
