//! Engine for moving homelessness counts across incongruent region systems and
//! estimating how local housing markets drive them.
//!
//! The crate is organized as a chain of independent stages:
//!
//! - [`geo`] — polygons, point-in-polygon tests, and spatial assignment of
//!   weighted points to regions.
//! - [`interpolate`] — mass-preserving disaggregation of region totals to
//!   weighted points and re-aggregation onto a second region system.
//! - [`panel`] — long-differenced estimation panels with piecewise splits of
//!   the price variable, drop logging, and sanity statistics.
//! - [`ols`] — least squares with cluster-robust covariance, Wald restriction
//!   tests, and margins curves.
//! - [`qdgmm`] — quasi-differenced method-of-moments estimation of a
//!   multiplicative-mean panel model.
//! - [`shiftshare`] — shift-share instrument construction, first stages,
//!   two-stage least squares, and over-identification diagnostics.
//! - [`market`] — an agent-based simulator of the lowest-quality housing
//!   market with income scarring.
//! - [`pipeline`] — file-driven orchestration used by the `atlas` binary.
//!
//! Each capability has a runnable demo under `examples/`; see the README for
//! the full list.

pub mod error;
pub mod geo;
pub mod interpolate;
pub mod io;
pub mod market;
pub mod ols;
pub mod panel;
pub mod pipeline;
pub mod qdgmm;
pub mod report;
pub mod shiftshare;

pub use error::{AtlasError, Result};
