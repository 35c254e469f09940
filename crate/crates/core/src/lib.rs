//! Mesh-based learned simulators with multi-node prediction, gated temporal
//! correction and multi-axis rotary positional encodings.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod mesh;
pub mod mnp;
pub mod model;
pub mod nn;
pub mod rng;
pub mod rollout;
pub mod temporal;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
