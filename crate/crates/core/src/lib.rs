//! Temporal knowledge graph extrapolation with historical contrastive
//! learning: full-timeline history indexing, copy-mechanism scoring heads,
//! a two-stage training procedure and mask-based inference.

pub mod autodiff;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod error;
pub mod eval;
pub mod history;
pub mod model;
pub mod optim;
pub mod synthetic;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use classifier::{build_mask, train_stage2, Classifier, ClassifierMetrics, MaskVector};
pub use data::{compute_stats, DatasetStats, Quadruple, Split, TkgDataset};
pub use error::{CenetError, Result};
pub use eval::{
    evaluate, AblationVariant, EvalOptions, FilterMode, InferenceConfig, KnownAnswers, MaskMode,
    Metrics, RankReport,
};
pub use history::{build_split_contexts, HistoryIndex, QueryContext, SparseCounts, SplitContexts};
pub use model::{
    EpochLog, Heads, HyperParams, ModelParams, QueryBatch, Stage1Trainer, TrainSwitches,
};
pub use optim::{Adam, AdamConfig, Parameter};
pub use tensor::{SparseRows, Tensor};
