//! Saliency alignment loss and a toy network to exercise it.
//!
//! The loss compares a model's input-gradient map `g` with a human
//! importance map `phi` at every level of a Gaussian pyramid: both levels are
//! z-normalized, rectified and compared by Euclidean distance. The full
//! objective adds cross-entropy and weight decay:
//!
//! ```text
//! total = lambda1 * mean_items(sum_i ||relu(z(P_i g)) - relu(z(P_i phi))||)
//!       + mean_items(cce) + lambda2 * sum(theta^2)
//! ```
//!
//! Gradients of `total` are exact, including the path through `g` itself,
//! which is differentiated by a second backward pass with rectifier masks held
//! fixed. Inputs are single-channel, so no channel reduction of `g` is needed.

mod loss;
mod network;
mod pyramid;
mod train;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use loss::{
    alignment_loss, alignment_per_level, kink_margin, total_loss, total_loss_and_gradient,
    HarmonizerConfig, HarmonizerLossBreakdown, KinkMargin, DEFAULT_LABEL_SMOOTHING,
};
pub use network::{accuracy, ToyBatch, ToyNetwork};
pub use pyramid::{
    clip_levels, gaussian_pyramid, max_levels, reduce, reduce_adjoint, z_normalize,
    z_normalize_backward, PyramidStack, ZNormalized, DEFAULT_LEVELS,
};
pub use train::{
    planted_label, planted_pilot, planted_saliency_task, planted_templates, toy_harmonize_train,
    AnnotatedBatch, EpochRecord, PilotReport, PilotRun, PilotSettings, PlantedTask, TrainConfig,
    TrainOutcome, PLANTED_SIZE,
};

#[derive(Debug, thiserror::Error)]
pub enum HarmonizerError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, HarmonizerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    Human,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub source: MapSource,
    pub image_id: String,
    pub values: Array2<f64>,
}

impl ImportanceMap {
    pub fn new(
        source: MapSource,
        image_id: impl Into<String>,
        values: Array2<f64>,
    ) -> Result<Self> {
        let (h, w) = values.dim();
        if h < 2 || w < 2 {
            return Err(HarmonizerError::Shape(format!(
                "map {h}x{w} is smaller than 2x2"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(HarmonizerError::NonFinite("importance map".into()));
        }
        Ok(Self {
            source,
            image_id: image_id.into(),
            values,
        })
    }
}
