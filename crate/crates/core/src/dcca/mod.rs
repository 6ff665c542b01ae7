//! Deep CCA: the correlation objective and the DS-DCCA training loop.

pub mod objective;
pub mod train;

pub use objective::{
    compute_projections, dcca_loss, dcca_loss_grad, estimate_covariances, CovarianceEstimates,
    LossCache, LossGradient,
};
pub use train::{
    features, project, train_dsdcca, train_dsdcca_with, ArchitectureConfig, DsccaModel,
    EpochRecord, TrainingConfig,
};
