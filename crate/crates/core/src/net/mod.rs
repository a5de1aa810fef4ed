//! Two-headed regressor with hand-written reverse-mode gradients, the
//! density-weighted L1 + heteroscedastic Gaussian objective, and Adam training.

mod adam;
mod checkpoint;
mod loss;
mod model;
mod train;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use loss::{combined_loss, CombinedObjective, LossBreakdown, Objective, SampleLoss};
pub use model::{
    sigmoid, softplus, Activation, Architecture, ConvBlock, RegressorModel, Trace,
    DEFAULT_EPS_SIGMA,
};
pub use train::{
    backward, batch_loss, fit, predict_dataset, train, EpochRecord, TrainConfig, TrainOutcome,
};
