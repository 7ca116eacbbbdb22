//! Benchmarking engine for scoring how well model activations predict
//! spatially mapped IT neural responses.
//!
//! Modules, bottom-up:
//!
//! - [`tensorio`]: NPB1 tensor files, checksummed manifests, activation ingestion.
//! - [`stats`]: rank correlation, Pareto fronts, t-tests, linear SVM, PCA.
//! - [`recordings`]: spike binning, spatial activity maps, noise ceilings.
//! - [`encoder_fit`]: patch extraction, PLS encoders, ceiling-normalized scores.
//! - [`harmonizer`]: multi-scale saliency alignment loss on a toy network.
//! - [`concepts`]: NMF concept extraction over predicted activities.
//! - [`synthgen`]: synthetic datasets with known ground truth.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod concepts;
pub mod encoder_fit;
pub mod harmonizer;
pub mod recordings;
pub mod stats;
pub mod synthgen;
pub mod tensorio;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
