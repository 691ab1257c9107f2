//! The outer estimation loop: shape-from-shading, surface integration,
//! point-cloud registration and shading-based depth refinement, iterated
//! until the estimated rotation stabilizes.

use nalgebra::{Matrix3, Point3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::normals_to_depth;
use crate::lighting::ShLighting;
use crate::refine::{refine_depth, refine_normals, RefineConfig};
use crate::register::{
    build_correspondences, icp_align, ransac_rst, Correspondence, CorrespondenceSet,
    NearestNeighbor, RansacConfig,
};
use crate::sfs::{solve_field, PriorField, SfsConfig};
use crate::synth::select_prior_pixels;
use crate::types::{
    orient_camera_facing, DepthGrid, LogShadingImage, NormalField, PointCloud, SimilarityPose,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub icp_max_iterations: usize,
    pub icp_tolerance: f64,
    /// Correspondence acceptance distance, scene units.
    pub correspondence_threshold: f64,
    pub ransac: RansacConfig,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            icp_max_iterations: 100,
            icp_tolerance: 1e-8,
            correspondence_threshold: 1.0,
            ransac: RansacConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Stop when the Frobenius distance between successive rotations drops
    /// below this.
    pub rotation_tolerance: f64,
    pub max_outer_iterations: usize,
    pub sfs: SfsConfig,
    pub registration: RegistrationConfig,
    pub refine: RefineConfig,
    /// Restrict the shape prior to a random fraction of the corresponded
    /// pixels (the prior-percentage experiments); `None` means all of them.
    pub prior_fraction: Option<f64>,
    pub seed: u64,
    /// When false, priors are sourced from the original input depth every
    /// iteration instead of the refined copy.
    pub prior_from_refined_depth: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rotation_tolerance: 1e-3,
            max_outer_iterations: 50,
            sfs: SfsConfig::default(),
            registration: RegistrationConfig::default(),
            refine: RefineConfig::default(),
            prior_fraction: None,
            seed: 0,
            prior_from_refined_depth: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_tolerance > 0.0) {
            return Err(Error::Config("rotation tolerance must be > 0".into()));
        }
        if self.max_outer_iterations == 0 {
            return Err(Error::Config("max outer iterations must be >= 1".into()));
        }
        self.sfs.validate()?;
        self.refine.validate()?;
        self.registration.ransac.validate()
    }
}

/// Per-iteration diagnostics, one record per completed outer iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub rot_delta: f64,
    pub beta_deg: f64,
    pub inliers: usize,
    pub sfs_mean_residual: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Final SfS normal field in the color frame.
    pub normals: NormalField,
    /// Integrated depth of the SfS estimate.
    pub depth_est: DepthGrid,
    /// Estimated pose mapping input-depth points onto the color frame.
    pub pose: SimilarityPose,
    /// Refined input depth.
    pub depth_refined: DepthGrid,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
}

/// A failed run still carries the diagnostics gathered so far.
#[derive(Debug)]
pub struct PipelineAbort {
    pub error: Error,
    pub trace: Vec<IterationRecord>,
}

impl std::fmt::Display for PipelineAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "pipeline aborted after {} iterations: {}", self.trace.len(), self.error)
    }
}

impl std::error::Error for PipelineAbort {}

struct Snapshot {
    normals: NormalField,
    depth_est: DepthGrid,
    pose: SimilarityPose,
    depth_refined: DepthGrid,
    rot_delta: f64,
}

/// Run the full iterative loop.
///
/// The first SfS pass runs without a prior (no correspondence exists yet);
/// from the second iteration on, pose-rotated input-depth normals at
/// corresponded pixels serve as the shape prior. Terminates when the
/// rotation update falls below the tolerance, when the iteration cap is
/// reached, or when the rotation delta has grown for five consecutive
/// iterations (the divergence guard returns the best state seen).
pub fn run_bimodal_stereo(
    shading: &LogShadingImage,
    input_depth: &DepthGrid,
    lighting: &ShLighting,
    cfg: &PipelineConfig,
) -> std::result::Result<PipelineOutput, PipelineAbort> {
    let mut trace: Vec<IterationRecord> = Vec::new();
    let abort = |error: Error, trace: &[IterationRecord]| PipelineAbort {
        error,
        trace: trace.to_vec(),
    };

    if let Err(e) = cfg.validate() {
        return Err(abort(e, &trace));
    }
    let (w, h) = (shading.width(), shading.height());

    let mut prev_rotation: Matrix3<f64> = Matrix3::identity();
    let mut prior_field = PriorField::empty(w, h);
    let mut prior_depth = input_depth.clone();
    let mut best: Option<Snapshot> = None;
    let mut growth_streak = 0usize;
    let mut prev_delta = f64::INFINITY;

    for k in 1..=cfg.max_outer_iterations {
        // Shape from shading in the color frame.
        let (normals, sfs_report) = solve_field(shading, lighting, &prior_field, &cfg.sfs)
            .map_err(|e| abort(e, &trace))?;
        let depth_est = normals_to_depth(&normals, input_depth.pitch_x, input_depth.pitch_y)
            .map_err(|e| abort(e, &trace))?;

        // Register the input-depth cloud onto the estimated cloud.
        let estimated_cloud = depth_est.point_cloud();
        let input_cloud = prior_depth.point_cloud();
        let icp_pose = icp_align(
            &input_cloud,
            &estimated_cloud,
            cfg.registration.icp_max_iterations,
            cfg.registration.icp_tolerance,
        )
        .map_err(|e| abort(e, &trace))?;
        let coarse = build_correspondences(
            &icp_pose,
            &input_cloud,
            &estimated_cloud,
            cfg.registration.correspondence_threshold,
        );
        let (pose, inliers) = ransac_rst(&input_cloud, &estimated_cloud, &coarse, &cfg.registration.ransac)
            .map_err(|e| abort(e, &trace))?;
        let correspondences = build_correspondences(
            &pose,
            &input_cloud,
            &estimated_cloud,
            cfg.registration.correspondence_threshold,
        );

        let rot_delta = (pose.rotation - prev_rotation).norm();
        trace.push(IterationRecord {
            k,
            rot_delta,
            beta_deg: pose.euler_deg.1,
            inliers: inliers.len(),
            sfs_mean_residual: sfs_report.mean_objective,
        });

        // Shading-based refinement of the input depth over the overlap.
        let pixel_pairs = pixel_correspondences(
            &correspondences,
            &input_cloud,
            &estimated_cloud,
            &prior_depth,
            &pose,
            cfg.registration.correspondence_threshold,
        );
        let depth_normals = prior_depth.normals().map_err(|e| abort(e, &trace))?;
        let (refined_normals, _) = refine_normals(
            &depth_normals,
            shading,
            lighting,
            &pose,
            &pixel_pairs,
            &normals,
            &cfg.refine,
        )
        .map_err(|e| abort(e, &trace))?;
        let depth_refined =
            refine_depth(&refined_normals, &prior_depth).map_err(|e| abort(e, &trace))?;

        let snapshot = Snapshot {
            normals,
            depth_est,
            pose: pose.clone(),
            depth_refined: depth_refined.clone(),
            rot_delta,
        };
        if rot_delta < cfg.rotation_tolerance {
            return Ok(finish(snapshot, trace, true));
        }
        if best.as_ref().map_or(true, |b| rot_delta < b.rot_delta) {
            best = Some(snapshot);
        }

        if rot_delta > prev_delta {
            growth_streak += 1;
            if growth_streak >= 5 {
                // Divergence guard: return the best state seen.
                let s = best.expect("at least one snapshot exists");
                return Ok(finish(s, trace, false));
            }
        } else {
            growth_streak = 0;
        }
        prev_delta = rot_delta;
        prev_rotation = pose.rotation;

        // Next iteration's prior: rotated refined-depth normals at the
        // corresponded color pixels.
        if cfg.prior_from_refined_depth {
            prior_depth = depth_refined;
        }
        let prior_normals = prior_depth.normals().map_err(|e| abort(e, &trace))?;
        prior_field = build_prior_field(
            w,
            h,
            &pixel_pairs,
            &prior_normals,
            &pose,
            cfg.prior_fraction,
            cfg.seed.wrapping_add(k as u64),
        )
        .map_err(|e| abort(e, &trace))?;
    }

    let s = best.ok_or_else(|| abort(Error::Solver("no iteration completed".into()), &trace))?;
    Ok(finish(s, trace, false))
}

fn finish(s: Snapshot, trace: Vec<IterationRecord>, converged: bool) -> PipelineOutput {
    PipelineOutput {
        normals: s.normals,
        depth_est: s.depth_est,
        pose: s.pose,
        depth_refined: s.depth_refined,
        trace,
        converged,
    }
}

/// Translate cloud-index correspondences into pixel-index pairs and extend
/// them with pseudo-correspondences for hole pixels whose neighborhood
/// supports a depth guess (these are what hole filling refines).
fn pixel_correspondences(
    correspondences: &CorrespondenceSet,
    input_cloud: &PointCloud,
    estimated_cloud: &PointCloud,
    prior_depth: &DepthGrid,
    pose: &SimilarityPose,
    threshold: f64,
) -> CorrespondenceSet {
    let src_pixels = input_cloud.source.as_ref();
    let tgt_pixels = estimated_cloud.source.as_ref();
    let mut pairs: Vec<Correspondence> = correspondences
        .pairs
        .iter()
        .filter_map(|c| {
            Some(Correspondence {
                source: *src_pixels?.get(c.source)?,
                target: *tgt_pixels?.get(c.target)?,
                distance: c.distance,
            })
        })
        .collect();

    // Hole pixels: average the valid 4-neighbors to place a tentative point,
    // then match it like any other.
    if let Some(tgt_pixels) = tgt_pixels {
        let nn = NearestNeighbor::new(&estimated_cloud.points);
        let (w, h) = (prior_depth.width(), prior_depth.height());
        for y in 0..h {
            for x in 0..w {
                if prior_depth.grid.is_valid(x, y) {
                    continue;
                }
                let mut sum = 0.0;
                let mut count = 0;
                let mut push = |xx: i64, yy: i64| {
                    if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                        if let Some(z) = prior_depth.grid.get(xx as usize, yy as usize) {
                            sum += z;
                            count += 1;
                        }
                    }
                };
                push(x as i64 - 1, y as i64);
                push(x as i64 + 1, y as i64);
                push(x as i64, y as i64 - 1);
                push(x as i64, y as i64 + 1);
                if count < 2 {
                    continue;
                }
                let guess = Point3::new(
                    x as f64 * prior_depth.pitch_x,
                    y as f64 * prior_depth.pitch_y,
                    sum / count as f64,
                );
                if let Some((j, dist)) = nn.nearest(&pose.apply_point(&guess)) {
                    if dist < threshold {
                        pairs.push(Correspondence {
                            source: y * w + x,
                            target: tgt_pixels[j],
                            distance: dist,
                        });
                    }
                }
            }
        }
    }
    CorrespondenceSet {
        pairs,
        threshold: correspondences.threshold,
    }
}

fn build_prior_field(
    width: usize,
    height: usize,
    pixel_pairs: &CorrespondenceSet,
    prior_normals: &NormalField,
    pose: &SimilarityPose,
    prior_fraction: Option<f64>,
    seed: u64,
) -> Result<PriorField> {
    let mut field = PriorField::empty(width, height);
    let mut assigned = vec![false; width * height];
    for pair in &pixel_pairs.pairs {
        let (dx, dy) = prior_normals.grid.coords(pair.source);
        let Some(n) = prior_normals.grid.get(dx, dy) else {
            continue;
        };
        let (cx, cy) = (pair.target % width, pair.target / width);
        if assigned[pair.target] {
            continue;
        }
        let rotated = orient_camera_facing((pose.rotation * n).normalize());
        field.grid.set(cx, cy, rotated);
        assigned[pair.target] = true;
    }
    if let Some(fraction) = prior_fraction {
        let keep = select_prior_pixels(&assigned, fraction, seed)?;
        for i in 0..assigned.len() {
            if assigned[i] && !keep[i] {
                field.grid.mask_out(i % width, i / width);
            }
        }
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{default_lighting, default_surface, synthesize_pair, SynthSpec};

    #[test]
    fn self_registration_converges_to_identity() {
        let depth = default_surface(16, 16);
        let spec = SynthSpec::new(depth, default_lighting());
        let pair = synthesize_pair(&spec).unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.max_outer_iterations = 5;
        let out = run_bimodal_stereo(&pair.shading, &pair.rotated_depth, &default_lighting(), &cfg)
            .unwrap();
        assert!(out.converged);
        assert!(out.trace.len() <= 2, "took {} iterations", out.trace.len());
        assert!((out.pose.rotation - Matrix3::identity()).norm() < 1e-6);
        assert!((out.pose.scale - 1.0).abs() < 1e-6);
    }

    #[test]
    fn trace_is_recorded_per_iteration() {
        let depth = default_surface(12, 12);
        let mut spec = SynthSpec::new(depth, default_lighting());
        spec.beta_deg = 10.0;
        let pair = synthesize_pair(&spec).unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.max_outer_iterations = 3;
        cfg.rotation_tolerance = 1e-12; // force the cap
        let out = run_bimodal_stereo(&pair.shading, &pair.rotated_depth, &default_lighting(), &cfg)
            .unwrap();
        assert_eq!(out.trace.len(), 3);
        for (i, rec) in out.trace.iter().enumerate() {
            assert_eq!(rec.k, i + 1);
        }
    }
}
