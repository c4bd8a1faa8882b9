//! Event detection in geo-tagged message streams by verifying power-law
//! distributions in per-region count series, at every level of a quad-tree.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: messages, regions, windows, detector configuration, tokenizer.
//! - [`timeseries`]: binning of timestamps into count series and block aggregation.
//! - [`selfsim`]: Hurst-parameter estimators (aggregate variance, R/S, Whittle).
//! - [`powerlaw`]: discrete power-law MLE, KS distance, bootstrap significance.
//! - [`quadtree`]: the recursive 4-way spatial partition of a query window.
//! - [`detect_basic`]: per-node power-law verification over tumbling windows.
//! - [`detect_advanced`]: embedding + CF-tree clustering + verification rounds.
//! - [`synth`]: synthetic labelled streams, fGn oracle and precision/recall evaluation.
//! - [`io`]: line-delimited records, event reports, scenario files.

pub mod detect_advanced;
pub mod detect_basic;
pub mod error;
pub mod io;
pub mod model;
pub mod powerlaw;
pub mod quadtree;
pub mod selfsim;
pub mod synth;
pub mod timeseries;

mod rng;
mod zeta;

pub use error::{Error, Result};
