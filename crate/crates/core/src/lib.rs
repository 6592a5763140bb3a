//! Spurious correlations in high-dimensional ridge regression and random
//! features models.
//!
//! The crate is organized bottom-up:
//!
//! * [`covmodel`] builds and validates block covariance models.
//! * [`detequiv`] evaluates the deterministic equivalents of the spurious
//!   correlation and test loss of ridge regression, together with their
//!   bounds and regularization thresholds.
//! * [`empirical`] samples Gaussian data, fits ridge and gradient flow
//!   estimators, and measures the same quantities on finite samples.
//! * [`rfmodel`] does the same for random features regression and maps it to
//!   an effective ridge problem.
//! * [`export`] writes results as CSV.

pub mod covmodel;
pub mod detequiv;
pub mod empirical;
pub mod error;
pub mod export;
pub mod linalg;
pub mod rfmodel;

pub use covmodel::{CovarianceModel, Diagnostics, ModelOptions, ModelSpec, SyntheticFamilyParams};
pub use detequiv::{DetEquiv, DeterministicPoint, GroundTruth, TradeoffThresholds};
pub use empirical::{Dataset, McEstimate, RidgeEstimate, TrialSummary};
pub use error::{Error, Result};
pub use rfmodel::{Activation, HermiteStats, RfConfig};
