//! Exemplar-adaptor forward/backward passes and the Adam optimizer.

mod adam;
mod adaptor;

pub use adam::{Adam, AdamConfig};
pub use adaptor::{
    adaptor_forward, sdm_loss_and_grad, AdaptorConfig, AdaptorGrads, AdaptorWeights, LossInstance,
    Nonlinearity, Normalization,
};

use serde::{Deserialize, Serialize};

use crate::activation::DEFAULT_KEPS;

/// Numerical settings shared by the training loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericsConfig {
    /// Guard added inside the logarithms of the log-form activation.
    pub k_eps: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        Self {
            k_eps: DEFAULT_KEPS,
            learning_rate: 1e-5,
            batch_size: 50,
            seed: 0,
        }
    }
}
