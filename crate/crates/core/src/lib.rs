//! Anchor-driven dynamic Gaussian splatting on the CPU.
//!
//! A canonical set of 3D Gaussians is deformed over time by a sparse set of
//! motion anchors. Each anchor predicts a rigid transform from a temporally
//! aggregated feature and the transforms are blended onto Gaussians with
//! normalized kernel weights. A differentiable splatting renderer closes the
//! loop so everything trains end to end from images.

pub mod autodiff;
pub mod deformation;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod hierarchy;
pub mod image;
pub mod losses;
pub mod math;
pub mod par;
pub mod renderer;
pub mod scene;
pub mod spatial;

pub use error::{Error, Result};
