//! Gated attention MIL: model, gradients, optimizer and training protocol.

pub mod adam;
pub mod model;
pub mod train;

pub use adam::{adam_step, AdamState};
pub use model::{
    attention_forward, bag_gradients, bag_loss, loss_and_gradients, AttentionModel, Forward,
    Gradients,
};
pub use train::{
    monte_carlo_cv, stratified_split, train_fold, CvConfig, CvResult, EarlyStopping, EpochRecord,
    FoldReport, FoldTraining, LabeledBag, TrainConfig,
};
