//! Joint depth and intrinsic image prediction from a single image.
//!
//! A global depth network, depth/intrinsic gradient networks and gradient scale networks are
//! combined through a joint CRF energy. Training alternates between the gradient networks and
//! the scale networks; inference minimizes the energy coarse-to-fine with screened-Poisson
//! solves.

pub mod cli;
pub mod config;
pub mod error;
pub mod image;
pub mod metrics;
pub mod data;
pub mod energy;
pub mod networks;
pub mod pipeline;
pub mod solver;
pub mod tensor;

pub use error::{Error, Result};
