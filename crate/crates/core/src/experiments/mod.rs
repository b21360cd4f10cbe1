//! Synthetic experiments: instance generation, metrics, tuning and replication.

pub mod metrics;
pub mod replicate;
pub mod simulate;
pub mod tuning;

pub use metrics::{kappa_oracle, rmse, test_error, trmse_tmae, Rating};
pub use simulate::{generate_instance, generate_instance_with, NoiseCalibration, Setting, SyntheticInstance};
pub use tuning::{split_validation, tune_and_fit, ChosenParams, Grids, SolverKind, TuneOptions, TuneOutcome, TuningData, Weighting};
pub use metrics::EvaluationReport;
pub use replicate::{run_replications, GridRule, MeanSe, ReplicateResult, ReplicationConfig, SummaryRow, SummaryTable, THREADS_ENV};
