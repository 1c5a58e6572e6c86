//! Model assembly, training and the pooling baseline.

mod baseline;
mod checkpoint;
mod config;
mod longer;
mod queries;
mod sweep;
mod train;

pub use baseline::SumPooling;
pub use config::{ModelConfig, QueryStrategy, TrainConfig};
pub use longer::{ForwardTrace, LongerModel, LongerParams};
pub use queries::{query_indices, select_queries};
pub use sweep::{axis_config, run_sweep, SweepAxis, SweepPoint, SweepReport, MIN_FIT_POINTS, SWEEP_CSV_HEADER};
pub use train::{bce_loss, evaluate, loss_and_grads, train, EpochStats, Trainable, TrainingReport};
