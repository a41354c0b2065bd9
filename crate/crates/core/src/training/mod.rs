//! The five-term objective, its uncertainty weighting, and the SGD loop.

mod config;
mod loss;
mod trainer;

pub use config::{StepDecay, TrainConfig};

pub use loss::{
    LossTerms, LossVars, SMOOTH_L1_BETA, UW_PARAM, UncertaintyWeights, compute_losses, smooth_l1, total_loss,
    weighted_total,
};
pub use trainer::{EpochRecord, TrainOutcome, evaluate_model, fit_stats, predict, train, train_observed, write_history_csv};
