//! Ray marching and analysis toolkit for radiance fields made of truncated
//! elliptical Gaussians.
//!
//! The crate is organised around the render-time [`Scene`]:
//!
//! * [`geometry`] - closed-form ellipsoid bounds, volume ratios and the
//!   isotropic regulariser.
//! * [`spatial`] - Morton ordering and the BVH used for closest-hit and
//!   segment queries.
//! * [`appearance`] - SH + SG radiance and the density/radiance mixture.
//! * [`renderer`] - the segment-buffered ray marcher with empty-space
//!   skipping and adaptive steps, plus a dense reference integrator.
//! * [`reparam`] - camera-sphere reparameterisation of primitive means.
//! * [`densify`] - densification statistics and image losses.
//! * [`scene_io`] - file formats and procedural scenes.
//! * [`bench`] - pipeline comparisons and locality/false-positive metrics.

pub mod appearance;
pub mod bench;
pub mod camera;
pub mod densify;
mod error;
pub mod geometry;
pub mod image;
pub mod renderer;
pub mod reparam;
pub mod sampling;
pub mod scene;
pub mod scene_io;
pub mod spatial;

pub use camera::Camera;
pub use error::{Error, Result};
pub use scene::{Primitive, Scene};

/// World-space 3-vector.
pub type Vec3 = nalgebra::Vector3<f64>;
/// Linear RGB triple.
pub type Rgb = nalgebra::Vector3<f64>;
