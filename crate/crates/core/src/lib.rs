//! Coordinate/beam dual-domain tracking of a vehicle from its radar echoes,
//! with a channel knowledge map (CKM) bridging the two domains.
//!
//! The crate is laid out bottom-up:
//!
//! - [`env`]: synthetic scene, ground-truth path geometry, motion and blockage.
//! - [`ckm`]: IDW-KNN channel knowledge map and the map-based measurement model.
//! - [`signal`]: transmit frames, echo synthesis, matched filtering, path
//!   separation and the per-path angle likelihood.
//! - [`cdomain`]: extended Kalman filter over position and velocity.
//! - [`bdomain`]: Markov beam tracker over a discrete angular grid.
//! - [`beamform`]: Fisher information, beam selection and min-max power allocation.
//! - [`harness`]: per-slot loop, baseline scheme, Monte Carlo runner, configuration
//!   and output files.

pub mod bdomain;
pub mod beamform;
pub mod cdomain;
pub mod ckm;
pub mod env;
pub mod error;
pub mod harness;
pub mod signal;

pub use error::{Error, Result};

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
