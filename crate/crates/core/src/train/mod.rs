//! Optimisation, the training loop and evaluation metrics.

pub mod metrics;
pub mod optim;
pub mod protocol;
pub mod run;

pub use metrics::{accuracy, argmax_rows, confusion, mean_std, weighted_f1, MeanStd};
pub use optim::{Adam, AdamConfig};
pub use run::{
    config_hash, parallel_map, predict, summarize, train_run, train_step, BestTracker, Examples, RunOutcome,
    RunRecord, Sets, Summary, TrainConfig,
};
pub use protocol::{jobs, run_job, run_jobs, Job};
