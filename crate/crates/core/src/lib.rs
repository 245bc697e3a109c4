//! Universal factor analysis for large N x T panels.
//!
//! The estimators recover one factor matrix shared by every conditional
//! quantile of the panel, together with quantile-specific loadings, by
//! alternating convolution-smoothed quantile regressions over a grid of
//! levels. An inverse-density weighted refit, with the nuisance densities
//! estimated on disjoint quarters of the panel, yields plug-in standard
//! errors. Rank selection uses a nuclear-norm penalized estimate of the
//! quantile common components.

pub mod diagnostics;
pub mod error;
pub mod idw;
pub mod inference;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod panel;
pub mod rank;
pub mod simlab;
pub mod sqr;
pub mod ufa;

#[cfg(test)]
mod testutil;

pub use diagnostics::Warning;
pub use error::{Result, UfmError};
pub use kernel::SmoothKernel;
pub use panel::{EstimatorConfig, FactorEstimate, Layout, PanelMatrix, QuantileGrid, RankChoice};
