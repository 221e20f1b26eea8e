//! Feature store, synthetic data, fold planning, metrics and checkpoints.

mod binio;
pub mod checkpoint;
mod folds;
mod metrics;
mod store;
mod synth;

pub use checkpoint::{
    checkpoint_into, load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint,
    CheckpointModel, CHECKPOINT_VERSION,
};
pub use folds::{kfold_split, FoldPlan};
pub use metrics::{format_mean_std_pct, mean_std, weighted_f1};
pub use store::{
    read_store, write_store, FeatureRecord, FeatureStore, SampleMeta, Split, STORE_VERSION,
};
pub use synth::{generate_synthetic, synthetic_class_of, SyntheticConfig};
