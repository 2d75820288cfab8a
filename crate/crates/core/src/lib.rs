//! Robust reduced-order model predictive control with certified
//! peak-to-peak error tubes.

use openblas_src as _;

pub mod baselines;
pub mod benchmark;
pub mod bounding;
pub mod conic;
pub mod csv;
pub mod error;
pub mod iqc;
pub mod linalg;
pub mod lti;
pub mod mpc;
pub mod pipeline;
pub mod reduction;
pub mod serde_mat;
pub mod synthesis;

pub use error::{Error, Result};
