//! Bimodal stereo: joint shape and pose estimation from one uncalibrated
//! color (log-shading) image and one depth map from a different view, under
//! known spherical-harmonics lighting.
//!
//! The pipeline alternates per-pixel shape-from-shading, surface integration
//! from gradients, similarity-pose registration of the two point clouds, and
//! shading-based refinement of the input depth, until the estimated rotation
//! stabilizes.

pub mod error;
pub mod integrate;
pub mod io;
pub mod lighting;
pub mod pipeline;
pub mod refine;
pub mod register;
pub mod sfs;
pub mod solver;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use lighting::{LightingPrior, ShLighting};
pub use types::{DepthGrid, Grid2D, LogShadingImage, NormalField, PointCloud, SimilarityPose};
