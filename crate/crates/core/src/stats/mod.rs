//! Statistical kernel shared by the scoring, reporting and
//! distribution-shift analyses.

mod distshift;
mod pareto;
mod pca;
mod rank;
mod svm;
mod ttest;

pub use distshift::{dist_shift_test, DistShiftResult, DEFAULT_REPEATS};
pub use pareto::{pareto_front, pareto_front_indices, ParetoPoint};
pub use pca::{pca_project, PcaProjection};
pub use rank::{median, mid_ranks, pearson, spearman};
pub use svm::{
    svm_loo_accuracy, LinearSvm, LinearSvmModel, DEFAULT_EPOCHS, DEFAULT_REGULARIZATION,
};
pub use ttest::{
    regularized_incomplete_beta, student_t_cdf, t_test_independent, t_test_one_sample, TTestResult,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("undefined correlation: constant input vector")]
    ConstantInput,
    #[error("non-finite input value")]
    NonFinite,
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, StatsError>;
