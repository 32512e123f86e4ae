//! Multi-level anchor-free spatio-temporal action detection at desk scale:
//! a trainable toy detector with decoupled 2D/3D feature fusion, dynamic
//! label assignment, composite detection loss, tube linking, and frame/video
//! mAP evaluation, plus the CLI harness that wires them together.

pub mod assign;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod linking;
pub mod loss;
pub mod model;
pub mod numeric;
pub mod postprocess;
pub mod train;
pub mod types;

pub use error::{Error, Result};
