//! Patch-level encoding models.
//!
//! A layer's feature map is cut into a grid of tiles; each tile's pooled
//! features are regressed onto the neural responses recorded at the matching
//! fixation position with PLS. Layers are scored by leave-one-image-out
//! Spearman correlation, normalized by each neuron's noise ceiling.
//!
//! The default patch grids (17x17, 9x9) are one cell larger than the
//! fixation grids they pair with (16x16, 7x7). Fixation maps are bilinearly
//! resampled onto the patch grid, corner cells aligned, whenever the two
//! differ.

mod patch;
mod pls;
mod score;

pub use patch::{
    build_design_matrix, patchify, patchify_with, resample_map, tile_bounds, DesignMatrix,
    PatchGrid, PatchIndex, Pooling,
};
pub use pls::{pls_fit, pls_predict, PlsEncoder, DEFAULT_COMPONENTS};
pub use score::{
    brain_score, cross_validate, image_score, layer_score, permutation_null, score_folds,
    BrainScore, CrossValidation, Exclusion, ExclusionReason, FoldPrediction, LayerFitResult,
    LayerScoreEntry, NullBand,
};

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("grid exceeds feature map: {grid} over {height}x{width}")]
    GridExceedsFeatureMap {
        grid: PatchGrid,
        height: usize,
        width: usize,
    },
    #[error("feature count mismatch: encoder expects {expected}, got {got}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("need ≥ 2 images, got {0}")]
    TooFewImages(usize),
    #[error("no layers scored")]
    NoLayers,
    #[error("layer {layer_id} has no activation for image {image_id}")]
    MissingActivation { layer_id: String, image_id: String },
    #[error("no noise ceilings for image {0}")]
    MissingCeiling(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, FitError>;
