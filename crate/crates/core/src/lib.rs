//! Fibered auto-encoders and geodesic transport between fibers.
//!
//! The latent space of a [`nn::FaeModel`] is split into a fiber block `f`
//! (within-condition variation, living in `[-1, 1]^m`) and a base block `b`
//! (one learned embedding per condition). The decoder pulls back the
//! Euclidean metric of sample space onto the latent space, and
//! [`geodesic::solve_geodesic`] transports a point of one fiber to another
//! by minimizing the discretized path energy under that metric.

pub mod autodiff;
pub mod data_io;
pub mod error;
pub mod geodesic;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod training;

pub use error::{Error, Result};
