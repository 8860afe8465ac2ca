//! Poisson unmixing and radionuclide identification for gamma-ray
//! spectrometry.
//!
//! A measured spectrum is modelled as Poisson counts around a non-negative
//! mix of column-normalised signatures (background plus radionuclides),
//! optionally warped by a physical variability mechanism: a tabulated
//! deformation manifold (e.g. shielding thickness) or a multiplicative
//! energy-gain shift. The crate provides:
//!
//! - signature libraries on uniform channel grids, with CSV/JSON persistence
//!   ([`signature`]) and synthetic built-ins ([`builtin`]);
//! - variability models and the fast gain-shift resampler ([`variability`]);
//! - maximum-likelihood solvers: multiplicative activity updates and
//!   block-coordinate descent over activities and the variability parameter
//!   ([`optimize`]);
//! - greedy identification under a likelihood-ratio acceptance test, with
//!   analytic or empirically calibrated thresholds ([`identify`]);
//! - a reproducible labelled-spectrum simulator ([`simulate`]);
//! - evaluation metrics and binned reports ([`metrics`]);
//! - batch orchestration shared by the command-line tool ([`pipeline`]).
//!
//! Everything is deterministic given a seed: simulation derives one RNG
//! stream per spectrum, so outputs are bit-identical at any parallelism.

pub mod builtin;
pub mod error;
pub mod hash;
pub mod identify;
pub mod metrics;
pub mod optimize;
pub mod pipeline;
pub mod signature;
pub mod simulate;
pub mod variability;

pub use error::{Error, Result};
