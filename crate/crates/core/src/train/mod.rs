//! Four-stage training: per-stage freezing, AdamW, warmup plus cosine
//! schedule, checkpoints and metrics.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod schedule;
pub mod stage;

pub use checkpoint::Checkpoint;
pub use config::{LossKind, PipelineConfig, Stage, StageConfig, StageOverrides};
pub use eval::{caption_accuracy, color_token_accuracy, eval_losses, Accuracy, LossReport, VisualMode};
pub use metrics::{MetricRow, RunMetrics};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use pipeline::{run_stage_files, train_all};
pub use schedule::{lr_at, warmup_steps};
pub use stage::{run_stage, StageOutcome};
