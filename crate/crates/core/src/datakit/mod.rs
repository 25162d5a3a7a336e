//! Datasets, batching and the on-disk formats.

mod checkpoint;
mod dataset;
mod maskfile;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, BestMetric, Checkpoint, NamedArray, CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC,
};
pub use dataset::{
    idx_from_bytes, idx_to_bytes, load_idx, split_and_batch, synth_blobs, Batch, DataSplits, Dataset, Normalization,
    SplitTag,
};
pub use maskfile::{
    export_mask, import_mask, mask_budgets, mask_from_str, mask_to_string, ImportedMask, MaskLayer, MASK_FORMAT,
    MASK_FORMAT_VERSION,
};
