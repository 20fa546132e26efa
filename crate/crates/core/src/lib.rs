//! Single-view, object-centric 3D scene completion.
//!
//! The crate composes segmentation, inpainting, image-to-3D, scaling and
//! registration stages into a pipeline whose neural stages run behind a
//! filesystem adapter protocol, and evaluates reconstructions with volumetric
//! IoU, Chamfer distance, MMD-EMD and a grasp-collision rate.

// `!(x > 0.0)` style checks reject NaN on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correspond;
pub mod error;
pub mod geom;
pub mod grasp;
pub mod maskops;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod register;
pub mod scaling;
pub mod synth;

pub use error::{Error, Result};
