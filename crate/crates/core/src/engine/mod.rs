//! Task-incremental protocol: class orders, replay memory, per-task training
//! and whole-run drivers.

mod memory;
mod run;
mod sequence;

pub use memory::ReplayMemory;
pub use run::{
    run_incremental, run_offline_upper_bound, train_task, EpochObserver, IncrementalState,
    RunConfig, RunRecord, RunRngs, TaskData, TaskReport, TrainSettings, OFFLINE_METHOD,
};
pub use sequence::{generate_task_sequences, TaskSequence};
