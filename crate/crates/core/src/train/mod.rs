//! Training, fine-tuning, evaluation metrics and the protocol runner.

pub mod eval;
pub mod metrics;
pub mod protocol;
pub mod report;
pub mod trainer;

pub use eval::{evaluate, Evaluation};
pub use metrics::{
    confusion_matrix, count, det_curve, reported_acer, round2, round_half_down, Counts, Det, DetPoint, ErrorRates,
    MetricsReport, ATTACK, DEFAULT_THRESHOLD,
};
pub use protocol::{run_protocol, target_for, ProtocolOutcome};
pub use report::{format_history, format_report, parse_report, ParsedReport};
pub use trainer::{finetune, infer, select_best, train, train_with, transfer, EpochStats, TrainConfig, TrainOutcome};
