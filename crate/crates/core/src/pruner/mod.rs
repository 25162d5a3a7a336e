//! Soft pruning with the joint loss, hard thresholding to the budget, and
//! the plain training loops used before and after pruning.

mod hard;
mod loss;
mod optim;
mod soft;
mod train;
mod transfer;

pub use hard::{hard_prune, hard_prune_ranked};
pub use loss::{chipnet_loss, ChipnetLoss, LossValues, Reduction};
pub use optim::{adamw_step, sgd_momentum_step, AdamWConfig, OptimState, SgdConfig};
pub use soft::{
    crisp_fraction, epoch_records_csv, soft_prune, BestSnapshot, EpochRecord, PruneConfig, PruneState,
    CRISP_TOLERANCE, EPOCH_CSV_HEADER, PSI_SLOT,
};
pub use train::{
    evaluate, recalibrate_bn, train_plain, train_records_csv, EvalResult, TrainConfig, TrainOutcome, TrainRecord,
    TRAIN_CSV_HEADER,
};
pub use transfer::{install_mask, transfer_mask};
