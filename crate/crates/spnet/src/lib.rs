//! Point cloud semantic segmentation built on shell-partitioned kernel
//! point convolution (SPConv): multi-shell kernel layouts, local feature
//! attention, Poisson-disk downsampling, feature-propagation upsampling,
//! and a small training stack with analytic gradients checked against
//! finite differences.

pub mod attention;
pub mod cloud;
pub mod error;
pub mod kernel;
pub mod layers;
pub mod normals;
pub mod oracle;
pub mod param;
pub mod ply;
pub mod sampling;
pub mod search;
pub mod spconv;

pub use cloud::PointCloud;
pub use error::{Error, Result};
pub mod cli;
