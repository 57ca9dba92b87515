//! Model assembly, training, extraction and evaluation.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use config::{Architecture, Config, ModelConfig, TrainConfig};
pub use metrics::{
    compute_eer, compute_min_dcf, compute_min_dcf_unnormalized, cosine_score, evaluate, evaluate_with, join_scores,
    score_trials, EvalMetrics,
};
pub use model::{Model, ModelOutput};
pub use optim::{AdamW, AdamWConfig};
pub use train::{
    classification_accuracy, extract_all, extract_embedding, load_model, save_model, train, EpochSummary, TrainReport,
};
