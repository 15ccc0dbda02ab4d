//! Tracking and sampling of bandlimited processes on graphs.
//!
//! The crate covers graph Fourier bases, in-band state-space models,
//! observability and least-squares recovery, sampling-set design, and
//! Kalman filtering with steady-state design.

pub mod error;
pub mod experiment;
pub mod kalman_tracking;
pub mod numerics;
pub mod observability;
pub mod parallel;
pub mod process_models;
pub mod sampling_design;
pub mod spectral_graph;

pub use error::{Error, Result};
pub use numerics::{Matrix, Vector};
