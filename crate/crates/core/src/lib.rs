#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Sparse-voxel fusion of dense 2D feature maps into an explicit 3D grid,
//! with open-vocabulary retrieval, relevance rendering and point-cloud
//! labelling against the fused field.

pub mod camera;
pub mod config;
pub mod error;
pub mod feat2d;
pub mod fuse3d;
pub mod geom;
pub mod geomreg;
pub mod grid;
pub mod image;
pub mod io;
pub mod mesh;
pub mod pipeline;
pub mod query;
pub mod render;
pub mod synth;
pub mod tsdf;

pub use error::{Error, Result};
