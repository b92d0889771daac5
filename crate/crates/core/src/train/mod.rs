//! Training loop, optimizer, checkpoints and inference drivers.

pub mod archive;
pub mod config;
pub mod gradcheck;
pub mod infer;
pub mod optim;
pub mod schedule;
pub mod trainer;
pub mod vocab;

pub use archive::{archive_precision, ArchiveHeader, ModelArchive};
pub use config::{Precision, TrainConfig};
pub use gradcheck::{gradient_check, GradcheckConfig, GradcheckOutcome};
pub use infer::{PredictionRecord, Predictor, ScoredEntity};
pub use optim::{clip_grad_norm, AdamW};
pub use schedule::lr_schedule;
pub use trainer::{EpochLog, Trainer};
pub use vocab::Vocab;
