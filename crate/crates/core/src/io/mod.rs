//! File formats: PFM and CSV depth maps, 3-channel PFM normal/shading
//! images, ASCII PLY point clouds, JSON poses and traces, PNG previews and
//! the output manifest.

mod csvgrid;
mod manifest;
mod pfm;
mod ply;
mod png;
mod pose;

pub use csvgrid::{load_depth_csv, save_depth_csv};
pub use manifest::{write_manifest, ManifestEntry};
pub use pfm::{
    load_depth_pfm, load_normals_pfm, load_shading_pfm, save_depth_pfm, save_normals_pfm,
    save_shading_pfm,
};
pub use ply::{load_cloud_ply, save_cloud_ply};
pub use png::{save_depth_png, save_normals_png};
pub use pose::{load_lighting, load_pose, load_trace, save_lighting, save_pose, save_trace};

use std::path::Path;

use crate::error::{Error, Result};
use crate::types::DepthGrid;

/// Load a depth map by file extension: `.pfm` or `.csv`. NaN encodes holes.
pub fn load_depth(path: &Path) -> Result<DepthGrid> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => load_depth_pfm(path),
        Some("csv") => load_depth_csv(path),
        other => Err(Error::parse(
            path.display().to_string(),
            format!("unsupported depth extension {other:?} (expected pfm or csv)"),
        )),
    }
}
