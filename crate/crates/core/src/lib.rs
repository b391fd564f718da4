//! Joint single-object tracking and implicit shape reconstruction from
//! LiDAR sequences, driven by an online-adapted signed-distance auto-decoder.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod lidar_sim;
pub mod prior_train;
pub mod recon;
pub mod sdf_net;
pub mod tracker;

pub use error::{Error, Result};
