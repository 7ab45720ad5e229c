//! Sinkhorn matrix scaling with Schrödinger potentials, stability and
//! concentration bounds, and the spectral theory of Sinkhorn-rescaled
//! random matrices.

pub mod ensembles;
pub mod error;
pub mod experiments;
pub mod io;
pub mod measures;
pub mod scaling;
pub mod spectral;
pub mod stability;

pub use error::{Error, Result};
pub use scaling::{
    check_scalability, gauge_distance, gauge_fix, sinkhorn_scale, Gauge, MarginPair, Potentials, Scalability,
    ScalabilityMode, ScalingProblem, ScalingResult, SinkhornOptions,
};
