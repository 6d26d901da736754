//! Gaze-swap dataset synthesis: projection geometry, face normalization,
//! attribute matching, Poisson-blended swapping with label transfer, the
//! projection-consistency gaze loss, evaluation binning and dataset I/O.

pub mod dataset_io;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod matching;
pub mod normalization;
pub mod raster;
pub mod swap;
pub mod synth;
pub mod toy;

pub use error::{Error, Result};
pub use geometry::{FaceRadius, GazeAngles, GazeVector, Plane, PlanePoint};
pub use raster::Image;
