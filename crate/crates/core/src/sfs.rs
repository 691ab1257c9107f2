//! Per-pixel shape-from-shading: recover a unit normal from three channel
//! log-intensities under known SH lighting, with an optional per-pixel
//! shape prior and a unit-norm penalty.

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lighting::ShLighting;
use crate::solver::{levenberg_marquardt, LmOptions};
use crate::types::{orient_camera_facing, Grid2D, LogShadingImage, NormalField};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SfsConfig {
    /// Shape-prior weight (lambda_2).
    pub prior_weight: f64,
    /// Unit-norm penalty weight (lambda_3).
    pub unit_weight: f64,
    pub max_iterations: usize,
    pub residual_tolerance: f64,
}

impl Default for SfsConfig {
    fn default() -> Self {
        Self {
            prior_weight: 1.0,
            unit_weight: 10.0,
            max_iterations: 1000,
            residual_tolerance: 1e-10,
        }
    }
}

impl SfsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.unit_weight > 0.0) {
            return Err(Error::Config("unit-norm weight must be > 0".into()));
        }
        if self.prior_weight < 0.0 {
            return Err(Error::Config("prior weight must be >= 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-pixel optional prior normals, already rotated into the color camera
/// frame. The grid mask marks which pixels carry a prior.
#[derive(Debug, Clone)]
pub struct PriorField {
    pub grid: Grid2D<Vector3<f64>>,
}

impl PriorField {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            grid: Grid2D::new(
                width,
                height,
                vec![Vector3::zeros(); width * height],
                vec![false; width * height],
            )
            .expect("shape is consistent"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (x, y, p) in self.grid.iter_valid() {
            if (p.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "prior normal at ({x}, {y}) has norm {}",
                    p.norm()
                )));
            }
        }
        Ok(())
    }
}

/// Residual vector of the per-pixel objective:
/// 3 brightness terms, 3 prior terms, 1 unit-norm term.
pub fn sfs_residuals(
    n: &Vector3<f64>,
    pixel_log_shading: &Vector3<f64>,
    lighting: &ShLighting,
    prior: Option<&Vector3<f64>>,
    cfg: &SfsConfig,
) -> [f64; 7] {
    let mut r = [0.0; 7];
    for j in 0..3 {
        r[j] = pixel_log_shading[j] - lighting.log_shading_channel(j, n);
    }
    if let Some(p) = prior {
        let w = cfg.prior_weight.sqrt();
        for k in 0..3 {
            r[3 + k] = w * (n[k] - p[k]);
        }
    }
    r[6] = cfg.unit_weight.sqrt() * (n.dot(n) - 1.0);
    r
}

/// Analytic Jacobian matching [`sfs_residuals`], row for row.
fn sfs_jacobian(
    n: &Vector3<f64>,
    lighting: &ShLighting,
    has_prior: bool,
    cfg: &SfsConfig,
) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(7, 3);
    for j in 0..3 {
        let m = lighting.matrix(j);
        // d/dn of [n,1]^T M [n,1] = 2 (M_3x3 n + m_col) for symmetric M.
        let grad = Vector3::new(
            2.0 * (m[(0, 0)] * n.x + m[(0, 1)] * n.y + m[(0, 2)] * n.z + m[(0, 3)]),
            2.0 * (m[(1, 0)] * n.x + m[(1, 1)] * n.y + m[(1, 2)] * n.z + m[(1, 3)]),
            2.0 * (m[(2, 0)] * n.x + m[(2, 1)] * n.y + m[(2, 2)] * n.z + m[(2, 3)]),
        );
        for k in 0..3 {
            jac[(j, k)] = -grad[k];
        }
    }
    if has_prior {
        let w = cfg.prior_weight.sqrt();
        for k in 0..3 {
            jac[(3 + k, k)] = w;
        }
    }
    let wu = cfg.unit_weight.sqrt();
    for k in 0..3 {
        jac[(6, k)] = 2.0 * wu * n[k];
    }
    jac
}

pub fn sfs_objective(
    n: &Vector3<f64>,
    pixel_log_shading: &Vector3<f64>,
    lighting: &ShLighting,
    prior: Option<&Vector3<f64>>,
    cfg: &SfsConfig,
) -> f64 {
    sfs_residuals(n, pixel_log_shading, lighting, prior, cfg)
        .iter()
        .map(|r| r * r)
        .sum()
}

#[derive(Debug, Clone)]
pub struct PixelSolve {
    pub normal: Vector3<f64>,
    pub objective: f64,
    pub converged: bool,
}

/// Solve one pixel's shape-from-shading problem.
///
/// Runs LM from `init`; if the result does not explain the shading, restarts
/// from a coarse set of hemisphere directions and keeps the best iterate.
/// The returned normal is renormalized to exact unit length and flipped to
/// the camera-facing hemisphere.
pub fn solve_pixel(
    pixel_log_shading: &Vector3<f64>,
    lighting: &ShLighting,
    prior: Option<&Vector3<f64>>,
    cfg: &SfsConfig,
    init: &Vector3<f64>,
) -> PixelSolve {
    let opts = LmOptions {
        max_iterations: cfg.max_iterations,
        objective_tolerance: cfg.residual_tolerance * cfg.residual_tolerance,
        step_tolerance: 1e-14,
    };
    let run = |start: &Vector3<f64>| {
        let eval = |x: &DVector<f64>| {
            let n = Vector3::new(x[0], x[1], x[2]);
            let r = sfs_residuals(&n, pixel_log_shading, lighting, prior, cfg);
            (
                DVector::from_row_slice(&r),
                sfs_jacobian(&n, lighting, prior.is_some(), cfg),
            )
        };
        levenberg_marquardt(DVector::from_row_slice(start.as_slice()), eval, &opts)
    };

    let mut best = run(init);
    // Escape local minima: the brightness equations can have a second
    // (convex/concave) solution, so retry from coarse directions when the
    // first descent got stuck above tolerance.
    if best.objective > opts.objective_tolerance.max(1e-12) {
        for start in coarse_hemisphere_starts() {
            let out = run(&start);
            if out.objective < best.objective {
                best = out;
            }
            if best.objective <= opts.objective_tolerance {
                break;
            }
        }
    }

    let raw = Vector3::new(best.x[0], best.x[1], best.x[2]);
    let unit = if raw.norm() > 1e-12 {
        orient_camera_facing(raw.normalize())
    } else {
        Vector3::new(0.0, 0.0, 1.0)
    };
    PixelSolve {
        normal: unit,
        objective: best.objective,
        converged: best.converged,
    }
}

/// Coarse multi-start directions: rings of polar angle on the camera-facing
/// hemisphere, 30 degree azimuthal steps.
fn coarse_hemisphere_starts() -> Vec<Vector3<f64>> {
    let mut starts = vec![Vector3::new(0.0, 0.0, 1.0)];
    for polar_deg in [25.0_f64, 50.0, 75.0] {
        let (sp, cp) = polar_deg.to_radians().sin_cos();
        for az_step in 0..12 {
            let az = (az_step as f64 * 30.0).to_radians();
            starts.push(Vector3::new(sp * az.cos(), sp * az.sin(), cp));
        }
    }
    starts
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldReport {
    pub solved_pixels: usize,
    pub non_converged: usize,
    pub mean_objective: f64,
}

/// Solve every masked-in pixel of a shading image independently.
///
/// Initialization is the prior where present, otherwise straight up.
pub fn solve_field(
    shading: &LogShadingImage,
    lighting: &ShLighting,
    priors: &PriorField,
    cfg: &SfsConfig,
) -> Result<(NormalField, FieldReport)> {
    cfg.validate()?;
    priors.validate()?;
    if !shading.grid.same_shape(&priors.grid) {
        return Err(Error::Dimension(
            "shading and prior field dimensions differ".into(),
        ));
    }
    let (w, h) = (shading.width(), shading.height());
    let pixels: Vec<usize> = shading
        .grid
        .mask()
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.then_some(i))
        .collect();

    let solves: Vec<(usize, PixelSolve)> = pixels
        .par_iter()
        .map(|&i| {
            let (x, y) = shading.grid.coords(i);
            let log_s = shading.grid.value_unchecked(x, y);
            let prior = priors.grid.get(x, y);
            let init = prior.copied().unwrap_or_else(|| Vector3::new(0.0, 0.0, 1.0));
            (i, solve_pixel(log_s, lighting, prior, cfg, &init))
        })
        .collect();

    let mut values = vec![Vector3::new(0.0, 0.0, 1.0); w * h];
    let mut mask = vec![false; w * h];
    let mut non_converged = 0;
    let mut total_objective = 0.0;
    for (i, solve) in &solves {
        values[*i] = solve.normal;
        mask[*i] = true;
        total_objective += solve.objective;
        if !solve.converged {
            non_converged += 1;
        }
    }
    let report = FieldReport {
        solved_pixels: solves.len(),
        non_converged,
        mean_objective: if solves.is_empty() {
            0.0
        } else {
            total_objective / solves.len() as f64
        },
    };
    Ok((NormalField::new(Grid2D::new(w, h, values, mask)?)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn test_lighting() -> ShLighting {
        // One dominant linear direction per channel keeps the per-pixel
        // problem well-posed.
        let mut l = vec![0.0; 27];
        l[0] = 0.6; // R dc
        l[3] = 0.35; // R x-linear
        l[9] = 0.6; // G dc
        l[10] = 0.35; // G y-linear
        l[18] = 0.6; // B dc
        l[20] = 0.35; // B z-linear
        l[13] = 0.05;
        l[26] = 0.04;
        ShLighting::from_coefficients(&l).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
                rng.random_range(0.2..1.0),
            );
            if v.norm() > 1e-3 {
                return v.normalize();
            }
        }
    }

    #[test]
    fn residuals_vanish_at_the_truth() {
        let lighting = test_lighting();
        let n = Vector3::new(0.2, -0.3, 1.0).normalize();
        let shading = lighting.log_shading(&n);
        let cfg = SfsConfig::default();
        let r = sfs_residuals(&n, &shading, &lighting, Some(&n), &cfg);
        for term in r {
            assert!(term.abs() < 1e-12, "residual {term}");
        }
    }

    #[test]
    fn zero_prior_weight_zeroes_prior_residuals() {
        let lighting = test_lighting();
        let cfg = SfsConfig {
            prior_weight: 0.0,
            ..Default::default()
        };
        let n = Vector3::new(0.0, 0.0, 1.0);
        let off_prior = Vector3::new(1.0, 0.0, 0.0);
        let r = sfs_residuals(&n, &Vector3::zeros(), &lighting, Some(&off_prior), &cfg);
        assert_eq!(&r[3..6], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn norm_residual_hand_value() {
        let lighting = test_lighting();
        let cfg = SfsConfig {
            unit_weight: 1.0,
            ..Default::default()
        };
        let n = Vector3::new(2.0, 0.0, 0.0); // norm 2, n.n = 4
        let r = sfs_residuals(&n, &Vector3::zeros(), &lighting, None, &cfg);
        assert_relative_eq!(r[6], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let lighting = test_lighting();
        let cfg = SfsConfig::default();
        let shading = Vector3::new(0.1, -0.2, 0.3);
        let prior = Vector3::new(0.0, 0.0, 1.0);
        let n = Vector3::new(0.3, -0.4, 0.85);
        let jac = sfs_jacobian(&n, &lighting, true, &cfg);
        let eps = 1e-7;
        for k in 0..3 {
            let mut plus = n;
            let mut minus = n;
            plus[k] += eps;
            minus[k] -= eps;
            let rp = sfs_residuals(&plus, &shading, &lighting, Some(&prior), &cfg);
            let rm = sfs_residuals(&minus, &shading, &lighting, Some(&prior), &cfg);
            for row in 0..7 {
                let fd = (rp[row] - rm[row]) / (2.0 * eps);
                assert_relative_eq!(jac[(row, k)], fd, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn roundtrip_recovers_the_normal_with_prior() {
        let lighting = test_lighting();
        let cfg = SfsConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let truth = random_unit(&mut rng);
            let shading = lighting.log_shading(&truth);
            let init = random_unit(&mut rng);
            let out = solve_pixel(&shading, &lighting, Some(&truth), &cfg, &init);
            let angle = out.normal.dot(&truth).clamp(-1.0, 1.0).acos();
            assert!(angle < 1e-4, "angular error {angle}");
        }
    }

    #[test]
    fn optimum_is_a_fixed_point() {
        let lighting = test_lighting();
        let cfg = SfsConfig::default();
        let truth = Vector3::new(-0.1, 0.25, 0.96).normalize();
        let shading = lighting.log_shading(&truth);
        let out = solve_pixel(&shading, &lighting, None, &cfg, &truth);
        assert!(out.objective <= 1e-12);
        let angle = out.normal.dot(&truth).clamp(-1.0, 1.0).acos();
        assert!(angle < 1e-6);
    }

    #[test]
    fn prior_saturation_pulls_to_the_prior() {
        let lighting = test_lighting();
        let cfg = SfsConfig {
            prior_weight: 1e6,
            ..Default::default()
        };
        let prior = Vector3::new(0.3, 0.1, 0.95).normalize();
        let shading = Vector3::new(0.5, 0.4, 0.6); // inconsistent with prior
        let out = solve_pixel(&shading, &lighting, Some(&prior), &cfg, &Vector3::new(0.0, 0.0, 1.0));
        let angle_deg = out.normal.dot(&prior).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle_deg < 0.1, "distance to prior {angle_deg} deg");
    }

    #[test]
    fn flat_field_recovers_flat_normals() {
        let lighting = test_lighting();
        let up = Vector3::new(0.0, 0.0, 1.0);
        let shading_value = lighting.log_shading(&up);
        let grid = Grid2D::new(8, 8, vec![shading_value; 64], vec![true; 64]).unwrap();
        let shading = LogShadingImage::new(grid).unwrap();
        let priors = PriorField::empty(8, 8);
        let (normals, report) =
            solve_field(&shading, &lighting, &priors, &SfsConfig::default()).unwrap();
        assert_eq!(report.solved_pixels, 64);
        for (_, _, n) in normals.grid.iter_valid() {
            let angle = n.dot(&up).clamp(-1.0, 1.0).acos();
            assert!(angle < 1e-4);
        }
    }
}
