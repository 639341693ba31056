//! Training, evaluation, ablation and the gradient suite.

pub mod checkpoint;
pub mod config;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{cosine_multiplier, OptimizerKind, Precision, TrainConfig};
pub use gradsuite::{gradcheck_all, GRADCHECK_TOLERANCE};
pub use metrics::{mae_rmse, metrics_csv, write_metrics, MetricsRow};
pub use model::{Model, Prediction};
pub use optim::{adam_step, radam_step, rectification, rho_inf, rho_t, AdamHyper, MomentState};
pub use train::{ablate, evaluate, named_grid, run, train, training_clips, AblationOutcome, Evaluation, GridPoint, RunReport};
