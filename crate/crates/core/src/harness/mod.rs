//! The continual-learning protocol: task streams, sequential training,
//! task-agnostic evaluation and the accuracy-matrix metrics.

pub mod metrics;
pub mod run;
pub mod stream;

pub use metrics::{average_accuracy, average_forgetting, AccuracyMatrix};
pub use run::{
    run_continual, ContinualRun, FinetuneModel, Learner, Method, Retrieval, RunOptions, RunResult, RunState,
    StageReport, Variant,
};
pub use stream::{build_stream, prepare_stream, ClassOrder, PreparedTask, Protocol, TaskSpec, TaskStream};
