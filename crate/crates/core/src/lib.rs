//! Learned image stitching for large-baseline pairs.
//!
//! The pipeline has two learned stages. A homography network regresses the
//! 4-point corner offsets of the target patch from a three-level feature
//! pyramid with normalized feature correlation, refining the estimate from
//! global to local. A deformation network then takes both images warped onto
//! a shared canvas and produces the stitched result, guided by an edge
//! stitching branch.
//!
//! Supporting modules synthesize training quadruples from any image corpus,
//! train both stages, and evaluate the 4-point RMSE.

pub mod checkpoint;
pub mod correlation;
pub mod dataset;
pub mod deformation_net;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod homography_net;
pub mod image;
mod layers;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{CanvasSpec, CornerOffsets, Homography, Point2};
pub use image::ImagePlane;
