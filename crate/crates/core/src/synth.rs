//! Synthetic benchmark protocol: render a log-shading image from a source
//! depth map, produce a rotated/clipped/subsampled depth map as the second
//! modality, and sweep rotation/overlap grids.

use nalgebra::{Point3, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lighting::ShLighting;
use crate::pipeline::{run_bimodal_stereo, PipelineConfig};
use crate::register::rotation_error;
use crate::types::{rot_xyz_deg, DepthGrid, Grid2D, LogShadingImage, NormalField, SimilarityPose};

/// Parameters of one synthetic color/depth pair.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub depth: DepthGrid,
    pub lighting: ShLighting,
    /// Ground-truth pose angles in degrees (X-Y-Z Euler).
    pub alpha_deg: f64,
    pub beta_deg: f64,
    pub gamma_deg: f64,
    /// Overlap wideness: fraction of the footprint kept after clipping.
    pub overlap: f64,
    /// Sampling-grid stride for the rotated depth map.
    pub stride: usize,
    /// Fraction of pixels receiving the shape prior in prior experiments.
    pub prior_fraction: f64,
    pub seed: u64,
    /// Optional additive Gaussian noise on the rotated depth values.
    pub depth_noise_sigma: f64,
}

impl SynthSpec {
    pub fn new(depth: DepthGrid, lighting: ShLighting) -> Self {
        Self {
            depth,
            lighting,
            alpha_deg: 0.0,
            beta_deg: 0.0,
            gamma_deg: 0.0,
            overlap: 1.0,
            stride: 1,
            prior_fraction: 0.0,
            seed: 0,
            depth_noise_sigma: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.overlap > 0.0 && self.overlap <= 1.0) {
            return Err(Error::Config(format!(
                "overlap wideness must be in (0, 1], got {}",
                self.overlap
            )));
        }
        if !(0.0..=1.0).contains(&self.prior_fraction) {
            return Err(Error::Config(format!(
                "prior fraction must be in [0, 1], got {}",
                self.prior_fraction
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if ![self.alpha_deg, self.beta_deg, self.gamma_deg]
            .iter()
            .all(|a| a.is_finite())
        {
            return Err(Error::NonFinite("synthesis angles".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub shading: LogShadingImage,
    pub rotated_depth: DepthGrid,
    /// Maps rotated-depth-grid points onto source-frame points.
    pub pose: SimilarityPose,
    pub normals: NormalField,
}

/// Smooth face-like analytic height field used as the default test surface.
pub fn default_surface(width: usize, height: usize) -> DepthGrid {
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let s = width.min(height) as f64;
    let values = (0..width * height)
        .map(|i| {
            let x = (i % width) as f64;
            let y = (i / width) as f64;
            let (dx, dy) = ((x - cx) / s, (y - cy) / s);
            // Dome with a ridge and a brow: smooth, moderate slopes.
            let dome = 0.22 * s * (-(dx * dx + dy * dy) / 0.18).exp();
            let ridge = 0.08 * s * (-(dx * dx) / 0.01 - (dy - 0.05).powi(2) / 0.08).exp();
            let brow = 0.05 * s * (-(dx * dx) / 0.05 - (dy + 0.18).powi(2) / 0.01).exp();
            dome + ridge + brow
        })
        .collect();
    DepthGrid::new(
        Grid2D::new(width, height, values, vec![true; width * height])
            .expect("shape is consistent"),
        1.0,
        1.0,
    )
    .expect("finite analytic surface")
}

/// Default lighting for the synthetic experiments: one dominant linear
/// direction per channel (x, y, z) over a shared ambient term, which keeps
/// the per-pixel SfS problem well-posed.
pub fn default_lighting() -> ShLighting {
    let mut l = vec![0.0; 27];
    l[0] = 0.6;
    l[3] = 0.35; // R: x-linear
    l[9] = 0.6;
    l[10] = 0.35; // G: y-linear
    l[18] = 0.6;
    l[20] = 0.35; // B: z-linear
    l[13] = 0.05; // mild quadratic content
    l[26] = 0.04;
    ShLighting::from_coefficients(&l).expect("valid default lighting")
}

/// Render the shading image and the rotated/clipped/subsampled depth map,
/// returning the ground-truth pose and normals for evaluation.
pub fn synthesize_pair(spec: &SynthSpec) -> Result<SynthPair> {
    spec.validate()?;
    let normals = spec.depth.normals()?;
    let shading = spec.lighting.render(&normals);

    let rotation = rot_xyz_deg(spec.alpha_deg, spec.beta_deg, spec.gamma_deg);
    let rotation_inv = rotation.transpose();
    let (px, py) = (spec.depth.pitch_x, spec.depth.pitch_y);

    // Rotate the scene points into the depth-camera frame.
    let rotated: Vec<Point3<f64>> = spec
        .depth
        .grid
        .iter_valid()
        .map(|(x, y, z)| Point3::from(rotation_inv * Vector3::new(x as f64 * px, y as f64 * py, *z)))
        .collect();
    if rotated.is_empty() {
        return Err(Error::Empty("source depth has no valid pixels".into()));
    }

    let min_x = rotated.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let max_x = rotated.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = rotated.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_y = rotated.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let raster_w = ((max_x - min_x) / px).round() as usize + 1;
    let raster_h = ((max_y - min_y) / py).round() as usize + 1;

    // Z-buffered nearest-cell splatting; the camera sits on +z, so the
    // visible sample per cell is the largest z.
    let mut cells: Vec<Option<f64>> = vec![None; raster_w * raster_h];
    for p in &rotated {
        let cx = ((p.x - min_x) / px).round() as usize;
        let cy = ((p.y - min_y) / py).round() as usize;
        let cell = &mut cells[cy.min(raster_h - 1) * raster_w + cx.min(raster_w - 1)];
        if cell.map_or(true, |z| p.z > z) {
            *cell = Some(p.z);
        }
    }
    median_fill(&mut cells, raster_w, raster_h);

    // Axis-aligned clip window in the rotated view keeping the overlap
    // fraction of the footprint, centered, full height.
    let window_w = ((raster_w as f64 * spec.overlap).round() as usize).max(1);
    let x0 = (raster_w - window_w) / 2;

    // Subsample by the stride onto a coarser grid; pitch grows accordingly.
    let out_w = (window_w + spec.stride - 1) / spec.stride;
    let out_h = (raster_h + spec.stride - 1) / spec.stride;
    let mut values = vec![0.0; out_w * out_h];
    let mut mask = vec![false; out_w * out_h];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5e_ed_de_91);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let (sx, sy) = (x0 + ox * spec.stride, oy * spec.stride);
            if sx >= raster_w || sy >= raster_h {
                continue;
            }
            if let Some(z) = cells[sy * raster_w + sx] {
                let noise = if spec.depth_noise_sigma > 0.0 {
                    spec.depth_noise_sigma * standard_normal(&mut rng)
                } else {
                    0.0
                };
                values[oy * out_w + ox] = z + noise;
                mask[oy * out_w + ox] = true;
            }
        }
    }
    if !mask.iter().any(|m| *m) {
        return Err(Error::Empty("clipping left no overlap".into()));
    }
    let rotated_depth = DepthGrid::new(
        Grid2D::new(out_w, out_h, values, mask)?,
        px * spec.stride as f64,
        py * spec.stride as f64,
    )?;

    // Grid cell (c, r) sits at world-x = c*stride*px + (min_x + x0*px), so
    // the pose back to the source frame is q = R (p + o).
    let origin = Vector3::new(min_x + x0 as f64 * px, min_y, 0.0);
    let pose = SimilarityPose::new(1.0, rotation, rotation * origin)?;

    Ok(SynthPair {
        shading,
        rotated_depth,
        pose,
        normals,
    })
}

fn median_fill(cells: &mut Vec<Option<f64>>, w: usize, h: usize) {
    // Cells missed by at most one sample get the median of their filled
    // 3x3 neighbors.
    let snapshot = cells.clone();
    for y in 0..h {
        for x in 0..w {
            if snapshot[y * w + x].is_some() {
                continue;
            }
            let mut neighbors: Vec<f64> = Vec::with_capacity(8);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        if let Some(z) = snapshot[ny as usize * w + nx as usize] {
                            neighbors.push(z);
                        }
                    }
                }
            }
            if neighbors.len() >= 5 {
                neighbors.sort_by(|a, b| a.partial_cmp(b).unwrap());
                cells[y * w + x] = Some(neighbors[neighbors.len() / 2]);
            }
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps it dependency-free.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniformly random subset of the masked-in pixels of size
/// `round(fraction * count)`, deterministic per seed.
pub fn select_prior_pixels(mask: &[bool], fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "prior fraction must be in [0, 1], got {fraction}"
        )));
    }
    let valid: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.then_some(i))
        .collect();
    let take = (fraction * valid.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, valid.len(), take.min(valid.len()));
    let mut out = vec![false; mask.len()];
    for i in picks.iter() {
        out[valid[i]] = true;
    }
    Ok(out)
}

/// One cell of the rotation/overlap sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub beta_deg: f64,
    pub overlap: f64,
    /// Normalized rotation error; `None` when the run failed.
    pub error: Option<f64>,
    pub failure: Option<String>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub betas: Vec<f64>,
    pub overlaps: Vec<f64>,
    /// Row-major: cells[beta_index * overlaps.len() + overlap_index].
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn cell(&self, beta_index: usize, overlap_index: usize) -> &SweepCell {
        &self.cells[beta_index * self.overlaps.len() + overlap_index]
    }

    /// CSV layout mirroring the paper-style table: rows = beta, columns =
    /// overlap wideness; failed cells print as `failed`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("beta_deg");
        for pw in &self.overlaps {
            out.push_str(&format!(",pw_{pw}"));
        }
        out.push('\n');
        for (bi, beta) in self.betas.iter().enumerate() {
            out.push_str(&format!("{beta}"));
            for oi in 0..self.overlaps.len() {
                match self.cell(bi, oi).error {
                    Some(err) => out.push_str(&format!(",{err:.6}")),
                    None => out.push_str(",failed"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Run the full pipeline over a (rotation, overlap) grid and tabulate the
/// normalized rotation error of each cell. Failures are recorded, not fatal.
pub fn run_sweep(
    depth: &DepthGrid,
    lighting: &ShLighting,
    betas: &[f64],
    overlaps: &[f64],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<SweepTable> {
    if betas.is_empty() || overlaps.is_empty() {
        return Err(Error::Config("sweep lists must be non-empty".into()));
    }
    let mut cells = Vec::with_capacity(betas.len() * overlaps.len());
    for beta in betas {
        for overlap in overlaps {
            let cell_seed = seed
                ^ beta.to_bits().rotate_left(17)
                ^ overlap.to_bits().rotate_left(41);
            let mut spec = SynthSpec::new(depth.clone(), lighting.clone());
            spec.beta_deg = *beta;
            spec.overlap = *overlap;
            spec.seed = cell_seed;
            let mut cell_cfg = cfg.clone();
            cell_cfg.registration.ransac.seed = cell_seed;
            let outcome = synthesize_pair(&spec).and_then(|pair| {
                let run =
                    run_bimodal_stereo(&pair.shading, &pair.rotated_depth, lighting, &cell_cfg)
                        .map_err(|abort| abort.error)?;
                let err = rotation_error(&run.pose.rotation, &pair.pose.rotation)?;
                Ok((err, run.trace.len()))
            });
            cells.push(match outcome {
                Ok((err, iterations)) => SweepCell {
                    beta_deg: *beta,
                    overlap: *overlap,
                    error: Some(err),
                    failure: None,
                    iterations,
                },
                Err(e) => SweepCell {
                    beta_deg: *beta,
                    overlap: *overlap,
                    error: None,
                    failure: Some(e.to_string()),
                    iterations: 0,
                },
            });
        }
    }
    Ok(SweepTable {
        betas: betas.to_vec(),
        overlaps: overlaps.to_vec(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rotation_full_overlap_is_the_identity() {
        let depth = default_surface(16, 16);
        let spec = SynthSpec::new(depth.clone(), default_lighting());
        let pair = synthesize_pair(&spec).unwrap();
        assert_eq!(pair.rotated_depth.width(), 16);
        assert_eq!(pair.rotated_depth.height(), 16);
        for (x, y, z) in pair.rotated_depth.grid.iter_valid() {
            let z_src = depth.grid.value_unchecked(x, y);
            assert!((z - z_src).abs() < 1e-9, "({x},{y}) differs by {}", z - z_src);
        }
        assert!((pair.pose.rotation - nalgebra::Matrix3::identity()).norm() < 1e-12);
        assert!(pair.pose.translation.norm() < 1e-9);
    }

    #[test]
    fn clip_window_area_fraction() {
        let depth = default_surface(32, 32);
        let mut spec = SynthSpec::new(depth, default_lighting());
        spec.overlap = 0.25;
        let pair = synthesize_pair(&spec).unwrap();
        let expected = (32.0f64 * 32.0 * 0.25).round();
        let actual = pair.rotated_depth.grid.valid_count() as f64;
        assert!(
            (actual - expected).abs() / expected <= 0.01,
            "area {actual} vs expected {expected}"
        );
    }

    #[test]
    fn ground_truth_pose_maps_grid_points_onto_source() {
        let depth = default_surface(24, 24);
        let mut spec = SynthSpec::new(depth.clone(), default_lighting());
        spec.beta_deg = 20.0;
        let pair = synthesize_pair(&spec).unwrap();
        let source_cloud = depth.point_cloud();
        let grid_cloud = pair.rotated_depth.point_cloud();
        let mapped = pair.pose.apply(&grid_cloud);
        let nn = crate::register::NearestNeighbor::new(&source_cloud.points);
        let mut worst = 0.0f64;
        for p in &mapped.points {
            let (_, d) = nn.nearest(p).unwrap();
            worst = worst.max(d);
        }
        // Rasterization quantizes x/y to the pixel pitch.
        assert!(worst <= 0.8, "worst mapped distance {worst}");
    }

    #[test]
    fn shading_mask_follows_normals() {
        let mut depth = default_surface(12, 12);
        depth.grid.mask_out(5, 5);
        let spec = SynthSpec::new(depth, default_lighting());
        let pair = synthesize_pair(&spec).unwrap();
        assert_eq!(pair.shading.grid.mask(), pair.normals.grid.mask());
        assert!(!pair.shading.grid.is_valid(5, 5));
    }

    #[test]
    fn prior_pixel_selection() {
        let mask = vec![true; 100];
        assert_eq!(
            select_prior_pixels(&mask, 0.0, 1).unwrap().iter().filter(|m| **m).count(),
            0
        );
        assert_eq!(
            select_prior_pixels(&mask, 1.0, 1).unwrap().iter().filter(|m| **m).count(),
            100
        );
        let a = select_prior_pixels(&mask, 0.5, 7).unwrap();
        let b = select_prior_pixels(&mask, 0.5, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|m| **m).count(), 50);
        let c = select_prior_pixels(&mask, 0.5, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stride_subsampling_scales_pitch() {
        let depth = default_surface(20, 20);
        let mut spec = SynthSpec::new(depth, default_lighting());
        spec.stride = 2;
        let pair = synthesize_pair(&spec).unwrap();
        assert_eq!(pair.rotated_depth.width(), 10);
        assert_eq!(pair.rotated_depth.pitch_x, 2.0);
    }
}
