//! Experiment configuration, the training loop, metrics and result files.

pub mod checkpoint;
pub mod config;
pub mod emit;
pub mod eval;
pub mod experiment;
pub mod metrics;

pub use checkpoint::Checkpoint;
pub use config::{DataSource, ExperimentConfig, MemoryPolicy, Method, Resolved};
pub use emit::{emit_results, landscape_csv, metrics_csv, summary_json};
pub use eval::{anytime_eval, argmax, dataset_accuracy, head_average_loss, predict_inputs, symmetric_grid, weight_landscape_probe};
pub use experiment::{load_data, run_experiment, run_on, RunOutput, TrainState};
pub use metrics::{compute_acc, compute_fm, MetricsLog, MetricsRow};
