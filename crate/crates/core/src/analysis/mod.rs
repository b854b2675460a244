//! Metrics and diagnostics: ROC-AUC, PCA, K-means with mode alignment, and
//! paired t-tests. Everything here is a pure function of its inputs.

mod cluster;
mod pca;
mod roc;
mod stats;

use thiserror::Error;

pub use cluster::{align_confusion, kmeans, ConfusionMatrix, KMeansResult, KMEANS_MAX_ITER};
pub use pca::{pca2, Pca2};
pub use roc::{roc_auc, roc_auc_brute_force};
pub use stats::{ln_gamma, mean_stderr, paired_t_test, reg_inc_beta, student_t_sf, t_critical, TTestReport};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("both classes must be present")]
    SingleClass,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("data has zero variance")]
    ZeroVariance,
    #[error("only {distinct} distinct points for k = {k}")]
    TooFewDistinct { distinct: usize, k: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Rows of a row-major `[n, d]` matrix.
pub(crate) fn rows(x: &[f64], d: usize) -> impl Iterator<Item = &[f64]> {
    x.chunks_exact(d)
}

pub(crate) fn check_matrix(x: &[f64], d: usize) -> Result<usize> {
    if d == 0 || x.len() % d != 0 {
        return Err(AnalysisError::InvalidArgument(format!(
            "{} values do not form rows of width {d}",
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    Ok(x.len() / d)
}
