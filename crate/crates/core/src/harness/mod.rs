//! Training, evaluation, benchmark metrics and transfer fine-tuning.
//!
//! Models train in `f32` with Adam on softmax cross-entropy. Shuffles and
//! initial values come from seed-derived streams, so a run is a pure function
//! of its configuration and data.

mod data;
mod experiment;
mod run;
mod train;

pub use data::LabeledSet;
pub use experiment::{ordering_wins, project, run_grid, time_train_steps, ArchTiming, ExperimentConfig, Projection, RunResult};
pub use run::{
    find_runs, load_log, load_model, report, save_model, save_run, RunConfig, METRICS_FILE, MODEL_FILE, REPORT_HEADER,
    RUN_CONFIG_FILE, TIMING_FILE,
};
pub use train::{
    accuracy_of, changed_params, evaluate, sample_efficiency, train, transfer_finetune, EvalRecord, MetricsRecord,
    TrainConfig, TrainLog,
};

#[cfg(test)]
mod tests;
