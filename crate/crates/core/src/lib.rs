//! Additive Bayesian network structure learning.
//!
//! Each node of the network is a generalized linear model in its parents;
//! learning proceeds by scoring every licit (child, parent set) pair with
//! information-theoretic scores, then finding the exact optimum DAG by
//! dynamic programming over node subsets. A simulation harness generates
//! ground-truth networks and measures structure recovery.
//!
//! The numeric kernels are generic over the floating-point scalar (see
//! [`scalar::Scalar`]); the aliases below pin `f64` for everyday use.

pub mod data;
pub mod fit;
pub mod glm;
pub mod linalg;
pub mod scalar;
pub mod score;
pub mod search;
pub mod sim;

pub use scalar::Scalar;

/// `f64` aliases for the main types.
pub type MatrixF64 = linalg::Matrix<f64>;
pub type DatasetF64 = data::Dataset<f64>;
pub type DesignMatrixF64 = data::DesignMatrix<f64>;
pub type GlmFitF64 = glm::GlmFit<f64>;
pub type ScoreCacheF64 = score::ScoreCache<f64>;
pub type CacheEntryF64 = score::CacheEntry<f64>;
pub type FitResultF64 = fit::FitResult<f64>;
pub type GroundTruthF64 = sim::GroundTruth<f64>;
