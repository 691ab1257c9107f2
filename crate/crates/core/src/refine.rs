//! Shading-based refinement of the input depth map: the symmetric
//! shape-from-shading problem that updates the depth-frame normals through
//! the color image and the estimated pose, then re-integrates depth over
//! the overlap.

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{integrate_gradients, normals_to_gradients};
use crate::lighting::ShLighting;
use crate::register::CorrespondenceSet;
use crate::solver::{levenberg_marquardt, LmOptions};
use crate::types::{
    orient_camera_facing, DepthGrid, Grid2D, LogShadingImage, NormalField, SimilarityPose,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Cross-prior weight pulling toward the pulled-back estimate (lambda_g2).
    pub prior_weight: f64,
    /// Unit-norm penalty weight (lambda_g3).
    pub unit_weight: f64,
    pub max_iterations: usize,
    pub residual_tolerance: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            prior_weight: 1.0,
            unit_weight: 10.0,
            max_iterations: 1000,
            residual_tolerance: 1e-10,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.unit_weight > 0.0) {
            return Err(Error::Config("unit-norm weight must be > 0".into()));
        }
        if self.prior_weight < 0.0 {
            return Err(Error::Config("prior weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Residuals of the symmetric per-pixel problem in the depth frame:
/// 3 brightness terms under the rotated normal, 3 pull terms toward the
/// pulled-back SfS estimate, 1 unit-norm term.
fn refine_residuals(
    n: &Vector3<f64>,
    log_shading: &Vector3<f64>,
    lighting: &ShLighting,
    rotation: &nalgebra::Matrix3<f64>,
    pulled_back: &Vector3<f64>,
    cfg: &RefineConfig,
) -> [f64; 7] {
    let rotated = rotation * n;
    let mut r = [0.0; 7];
    for j in 0..3 {
        r[j] = log_shading[j] - lighting.log_shading_channel(j, &rotated);
    }
    let w = cfg.prior_weight.sqrt();
    for k in 0..3 {
        r[3 + k] = w * (n[k] - pulled_back[k]);
    }
    r[6] = cfg.unit_weight.sqrt() * (n.dot(n) - 1.0);
    r
}

fn refine_jacobian(
    n: &Vector3<f64>,
    lighting: &ShLighting,
    rotation: &nalgebra::Matrix3<f64>,
    cfg: &RefineConfig,
) -> DMatrix<f64> {
    let rotated = rotation * n;
    let mut jac = DMatrix::zeros(7, 3);
    for j in 0..3 {
        let m = lighting.matrix(j);
        // Gradient in the rotated frame, chained back through R.
        let grad_rot = Vector3::new(
            2.0 * (m[(0, 0)] * rotated.x + m[(0, 1)] * rotated.y + m[(0, 2)] * rotated.z + m[(0, 3)]),
            2.0 * (m[(1, 0)] * rotated.x + m[(1, 1)] * rotated.y + m[(1, 2)] * rotated.z + m[(1, 3)]),
            2.0 * (m[(2, 0)] * rotated.x + m[(2, 1)] * rotated.y + m[(2, 2)] * rotated.z + m[(2, 3)]),
        );
        let grad = rotation.transpose() * grad_rot;
        for k in 0..3 {
            jac[(j, k)] = -grad[k];
        }
    }
    let w = cfg.prior_weight.sqrt();
    for k in 0..3 {
        jac[(3 + k, k)] = w;
    }
    let wu = cfg.unit_weight.sqrt();
    for k in 0..3 {
        jac[(6, k)] = 2.0 * wu * n[k];
    }
    jac
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineReport {
    pub refined_pixels: usize,
    pub non_converged: usize,
}

/// Refine the depth-frame normals over the corresponded (overlap) region.
///
/// For each correspondence (depth pixel h, color pixel i), solves the
/// symmetric least-squares problem with the color shading at i evaluated
/// under the pose-rotated normal and a pull toward the pulled-back SfS
/// normal. Non-corresponded pixels pass through unchanged. Initialization is
/// the current depth normal where present, else the pulled-back estimate,
/// which also fills holes inside the overlap.
///
/// Correspondence pairs here are in pixel-index space: `source` indexes the
/// depth grid, `target` the color grid.
pub fn refine_normals(
    depth_normals: &NormalField,
    shading: &LogShadingImage,
    lighting: &ShLighting,
    pose: &SimilarityPose,
    correspondences: &CorrespondenceSet,
    estimated_normals: &NormalField,
    cfg: &RefineConfig,
) -> Result<(NormalField, RefineReport)> {
    cfg.validate()?;
    let (w, h) = (depth_normals.width(), depth_normals.height());
    let rotation = pose.rotation;
    let rotation_inv = rotation.transpose();

    // (depth pixel index, color pixel index) jobs with valid shading and a
    // valid SfS normal at the color pixel.
    let jobs: Vec<(usize, usize)> = correspondences
        .pairs
        .iter()
        .filter_map(|c| {
            let (cx, cy) = estimated_normals.grid.coords(c.target);
            let shading_ok = shading.grid.get(cx, cy).is_some();
            let normal_ok = estimated_normals.grid.get(cx, cy).is_some();
            (shading_ok && normal_ok).then_some((c.source, c.target))
        })
        .collect();

    let opts = LmOptions {
        max_iterations: cfg.max_iterations,
        objective_tolerance: cfg.residual_tolerance * cfg.residual_tolerance,
        step_tolerance: 1e-14,
    };

    let solved: Vec<(usize, Vector3<f64>, bool)> = jobs
        .par_iter()
        .map(|&(depth_idx, color_idx)| {
            let (cx, cy) = shading.grid.coords(color_idx);
            let log_s = shading.grid.value_unchecked(cx, cy);
            let pulled_back =
                orient_camera_facing((rotation_inv * estimated_normals.grid.value_unchecked(cx, cy)).normalize());
            let (dx, dy) = depth_normals.grid.coords(depth_idx);
            let init = depth_normals
                .grid
                .get(dx, dy)
                .copied()
                .unwrap_or(pulled_back);
            let eval = |x: &DVector<f64>| {
                let n = Vector3::new(x[0], x[1], x[2]);
                let r = refine_residuals(&n, log_s, lighting, &rotation, &pulled_back, cfg);
                (
                    DVector::from_row_slice(&r),
                    refine_jacobian(&n, lighting, &rotation, cfg),
                )
            };
            let out = levenberg_marquardt(DVector::from_row_slice(init.as_slice()), eval, &opts);
            let raw = Vector3::new(out.x[0], out.x[1], out.x[2]);
            let unit = if raw.norm() > 1e-12 {
                orient_camera_facing(raw.normalize())
            } else {
                init
            };
            (depth_idx, unit, out.converged)
        })
        .collect();

    let mut values: Vec<Vector3<f64>> = depth_normals.grid.values().to_vec();
    let mut mask: Vec<bool> = depth_normals.grid.mask().to_vec();
    let mut non_converged = 0;
    for (idx, normal, converged) in &solved {
        values[*idx] = *normal;
        mask[*idx] = true;
        if !converged {
            non_converged += 1;
        }
    }
    let report = RefineReport {
        refined_pixels: solved.len(),
        non_converged,
    };
    Ok((NormalField::new(Grid2D::new(w, h, values, mask)?)?, report))
}

/// Re-integrate the refined normals into a depth map, anchored to the input
/// depth's mean over the shared masked-in region.
///
/// Pixels that were holes in the input but carry refined normals become
/// masked-in.
pub fn refine_depth(refined_normals: &NormalField, input_depth: &DepthGrid) -> Result<DepthGrid> {
    if !refined_normals.grid.same_shape(&input_depth.grid) {
        return Err(Error::Dimension(
            "refined normals and input depth dimensions differ".into(),
        ));
    }
    let grads = normals_to_gradients(refined_normals);
    let mut depth = integrate_gradients(&grads, input_depth.pitch_x, input_depth.pitch_y)?;

    // Gauge: match the input's mean over pixels valid in both.
    let mut sum_in = 0.0;
    let mut sum_out = 0.0;
    let mut count = 0usize;
    for (x, y, z) in depth.grid.iter_valid() {
        if let Some(z_in) = input_depth.grid.get(x, y) {
            sum_in += z_in;
            sum_out += z;
            count += 1;
        }
    }
    if count > 0 {
        let offset = sum_in / count as f64 - sum_out / count as f64;
        let (w, h) = (depth.grid.width(), depth.grid.height());
        for y in 0..h {
            for x in 0..w {
                if depth.grid.is_valid(x, y) {
                    let z = *depth.grid.value_unchecked(x, y);
                    depth.grid.set(x, y, z + offset);
                }
            }
        }
    }
    Ok(depth)
}
