//! Spatial infrastructure: triangle BVH, point kd-tree, surface sampling and
//! parametric shape construction.

pub mod bvh;
pub mod kdtree;
pub mod sampling;
pub mod shapes;
pub mod tri;

pub use bvh::TriangleBvh;
pub use kdtree::KdTree;
pub use sampling::{sample_cloud, sample_surface, SurfaceSample};
