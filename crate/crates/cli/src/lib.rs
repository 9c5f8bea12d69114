//! Command-line front end: run configuration and the `stats`, `train`,
//! `evaluate`, `predict` and `export-embeddings` commands.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_evaluate, cmd_export_embeddings, cmd_predict, cmd_stats, cmd_train, evaluate_loaded,
    load_contexts, load_dataset, Candidate, EmbeddingLine, EvalRequest, ExportOutcome,
    PredictOutcome, PredictRequest, TrainOptions, TrainOutcome, MODEL_FILE, TRAIN_LOG_FILE,
};
pub use config::{CacheConfig, DataConfig, RunConfig, CACHE_DIR_ENV};
