//! Temporal cardiac image segmentation built around explicit motion modelling.
//!
//! The crate implements the full pipeline: an unsupervised 3D deformation-field
//! estimator (`SsNet`), a motion-guided dual-branch segmentation network
//! (`SsSl`) with bi-directional fusion, a reverse-mode differentiation engine
//! sized to exactly the operator set those networks need, a synthetic 4D
//! cardiac phantom with analytic ground truth, and segmentation / flow metrics.

pub mod autodiff;
pub mod error;
pub mod metrics;
pub mod network;
pub mod objectives;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};
