//! Simulation, neural estimation and validation for spatial extremes under
//! the GEV spatial autoregressive (GEV-SAR) field model.

pub mod dataset;
pub mod diagnostics;
pub mod distributions;
pub mod error;
pub mod io;
pub mod lattice;
pub mod mle;
pub mod network;
pub mod quantile;
pub mod rng;
pub mod spline;
pub mod stats;
pub mod tiling;

pub use error::{Error, ErrorKind, Result};
