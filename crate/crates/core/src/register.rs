//! Similarity-pose estimation between two point clouds: ICP initialization,
//! RANSAC over the linear 12-parameter RST model, correspondence acceptance
//! and Euler-angle decomposition.

use nalgebra::{DMatrix, DVector, Matrix3, Point3, Vector3};
use rand::prelude::*;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::{levenberg_marquardt, LmOptions};
use crate::types::{euler_xyz_deg, rot_xyz_deg, PointCloud, SimilarityPose};

/// Exact nearest-neighbor index; brute force is plenty at desk scale and
/// keeps results deterministic.
pub struct NearestNeighbor<'a> {
    points: &'a [Point3<f64>],
}

impl<'a> NearestNeighbor<'a> {
    pub fn new(points: &'a [Point3<f64>]) -> Self {
        Self { points }
    }

    pub fn nearest(&self, query: &Point3<f64>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in self.points.iter().enumerate() {
            let d2 = (p - query).norm_squared();
            if best.map_or(true, |(_, b)| d2 < b) {
                best = Some((i, d2));
            }
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
    }
}

/// One accepted source-to-target match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source: usize,
    pub target: usize,
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
    pub threshold: f64,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub min_sample: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            inlier_threshold: 1.0,
            min_sample: 4,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_sample < 4 {
            return Err(Error::Config(
                "RANSAC min_sample must be >= 4 (12 unknowns, 3 equations per pair)".into(),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::Config("RANSAC iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Closed-form similarity fit (Umeyama) for paired points.
fn fit_similarity_paired(
    source: &[Point3<f64>],
    target: &[Point3<f64>],
) -> Result<SimilarityPose> {
    let n = source.len();
    if n < 3 || n != target.len() {
        return Err(Error::Degenerate(format!(
            "similarity fit needs >= 3 paired points, got {n}"
        )));
    }
    let mean_s = source.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n as f64;
    let mean_t = target.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n as f64;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s.coords - mean_s;
        let dt = t.coords - mean_t;
        cov += dt * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= n as f64;
    var_s /= n as f64;
    if var_s < 1e-15 {
        return Err(Error::Degenerate("source points are coincident".into()));
    }

    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    if svd.singular_values[1] < 1e-12 * svd.singular_values[0].max(1e-300) {
        return Err(Error::Degenerate("collinear point configuration".into()));
    }
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * vt;
    let scale = (svd.singular_values.component_mul(&d.diagonal())).sum() / var_s;
    if !(scale > 0.0) {
        return Err(Error::Degenerate("non-positive similarity scale".into()));
    }
    let translation = mean_t - scale * (rotation * mean_s);
    SimilarityPose::new(scale, rotation, translation)
}

/// Iterative closest point with a similarity model.
///
/// Alternates nearest-neighbor matching and a closed-form similarity fit;
/// the mean nearest-neighbor distance is non-increasing across sweeps
/// because the best pose seen is kept.
pub fn icp_align(
    source: &PointCloud,
    target: &PointCloud,
    max_iterations: usize,
    tolerance: f64,
) -> Result<SimilarityPose> {
    if source.len() < 4 || target.len() < 4 {
        return Err(Error::Empty("ICP needs at least 4 points per cloud".into()));
    }
    let nn = NearestNeighbor::new(&target.points);
    let mut pose = SimilarityPose::identity();
    let mut best_pose = pose.clone();
    let mut best_cost = f64::INFINITY;
    let mut prev_cost = f64::INFINITY;

    for _ in 0..max_iterations {
        let moved: Vec<Point3<f64>> = source.points.iter().map(|p| pose.apply_point(p)).collect();
        let mut matched_target = Vec::with_capacity(moved.len());
        let mut cost = 0.0;
        for p in &moved {
            let (idx, dist) = nn.nearest(p).expect("target is non-empty");
            matched_target.push(target.points[idx]);
            cost += dist;
        }
        cost /= moved.len() as f64;
        if cost < best_cost {
            best_cost = cost;
            best_pose = pose.clone();
        }
        let stalled =
            prev_cost.is_finite() && prev_cost - cost < tolerance * prev_cost.max(1e-300);
        prev_cost = cost;
        // Refit on the current matches, mapping the original source points.
        pose = fit_similarity_paired(&source.points, &matched_target)?;
        if stalled {
            break;
        }
    }
    let final_cost = mean_nn_distance(&pose, source, &nn);
    if final_cost < best_cost {
        best_pose = pose;
    }
    Ok(best_pose)
}

fn mean_nn_distance(pose: &SimilarityPose, source: &PointCloud, nn: &NearestNeighbor) -> f64 {
    source
        .points
        .iter()
        .map(|p| nn.nearest(&pose.apply_point(p)).expect("non-empty").1)
        .sum::<f64>()
        / source.len() as f64
}

/// Linear least-squares fit of the unconstrained 12-parameter RST model
/// (a 3x3 matrix plus translation) from point pairs.
pub fn fit_rst_linear(
    source: &[Point3<f64>],
    target: &[Point3<f64>],
) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    let n = source.len();
    if n < 4 || n != target.len() {
        return Err(Error::Degenerate(format!(
            "RST fit needs >= 4 paired points, got {n}"
        )));
    }
    let mut a = DMatrix::zeros(3 * n, 12);
    let mut b = DVector::zeros(3 * n);
    for (k, (s, t)) in source.iter().zip(target).enumerate() {
        for row in 0..3 {
            for col in 0..3 {
                a[(3 * k + row, 3 * row + col)] = s.coords[col];
            }
            a[(3 * k + row, 9 + row)] = 1.0;
            b[3 * k + row] = t.coords[row];
        }
    }
    let svd = a.svd(true, true);
    let max_sv = svd.singular_values.max();
    if svd.singular_values.iter().any(|&s| s < 1e-10 * max_sv) {
        return Err(Error::Degenerate(
            "rank-deficient sample (coplanar or collinear points)".into(),
        ));
    }
    let theta = svd
        .solve(&b, 1e-10 * max_sv)
        .map_err(|e| Error::Solver(e.to_string()))?;
    let matrix = Matrix3::from_iterator((0..9).map(|i| theta[i])).transpose();
    let translation = Vector3::new(theta[9], theta[10], theta[11]);
    Ok((matrix, translation))
}

/// Scale and X-Y-Z Euler angles of a scaled-rotation matrix.
///
/// The scale is split off first (cube root of the determinant), the matrix is
/// projected onto SO(3), and the angles are refined by Levenberg-Marquardt on
/// the Frobenius objective from a closed-form start.
pub fn decompose_rotation(a: &Matrix3<f64>) -> Result<(f64, f64, f64, f64)> {
    let det = a.determinant();
    if det <= 0.0 {
        return Err(Error::NotSimilarity(format!(
            "matrix has non-positive determinant {det} (reflection?)"
        )));
    }
    let svd = a.svd(false, false);
    let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
    if (smax - smin) / smax > 0.01 {
        return Err(Error::NotSimilarity(format!(
            "anisotropic singular values ({smin:.6} .. {smax:.6})"
        )));
    }
    let scale = det.cbrt();
    let rotation = project_rotation(&(a / scale));

    let (a0, b0, g0) = euler_xyz_deg(&rotation);
    let eval = |x: &DVector<f64>| {
        let r = rot_xyz_deg(x[0], x[1], x[2]);
        let res = DVector::from_iterator(9, (r - rotation).iter().copied());
        let jac = euler_jacobian_fd(x[0], x[1], x[2]);
        (res, jac)
    };
    let out = levenberg_marquardt(
        DVector::from_vec(vec![a0, b0, g0]),
        eval,
        &LmOptions {
            max_iterations: 100,
            objective_tolerance: 1e-24,
            step_tolerance: 1e-14,
        },
    );
    let (alpha, beta, gamma) = (out.x[0], out.x[1], out.x[2]);
    let reconstruction = (rot_xyz_deg(alpha, beta, gamma) - rotation).norm();
    if reconstruction > 1e-6 {
        return Err(Error::Solver(format!(
            "Euler fit left reconstruction error {reconstruction:.3e}"
        )));
    }
    Ok((scale, alpha, beta, gamma))
}

fn euler_jacobian_fd(alpha: f64, beta: f64, gamma: f64) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(9, 3);
    let eps = 1e-6;
    let base = [alpha, beta, gamma];
    for k in 0..3 {
        let mut plus = base;
        let mut minus = base;
        plus[k] += eps;
        minus[k] -= eps;
        let dp = rot_xyz_deg(plus[0], plus[1], plus[2]);
        let dm = rot_xyz_deg(minus[0], minus[1], minus[2]);
        for (row, (p, m)) in dp.iter().zip(dm.iter()).enumerate() {
            jac[(row, k)] = (p - m) / (2.0 * eps);
        }
    }
    jac
}

/// Closest rotation in Frobenius norm.
fn project_rotation(a: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = a.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// RANSAC over the linear RST model.
///
/// Consensus is the inlier count with ties broken by the smaller total
/// inlier residual, then by sample order; deterministic for a fixed seed.
pub fn ransac_rst(
    source: &PointCloud,
    target: &PointCloud,
    correspondences: &CorrespondenceSet,
    cfg: &RansacConfig,
) -> Result<(SimilarityPose, Vec<usize>)> {
    cfg.validate()?;
    let pairs = &correspondences.pairs;
    if pairs.len() < cfg.min_sample {
        return Err(Error::RegistrationFailure(format!(
            "only {} correspondences, need at least {}",
            pairs.len(),
            cfg.min_sample
        )));
    }
    let src_of = |c: &Correspondence| source.points[c.source];
    let tgt_of = |c: &Correspondence| target.points[c.target];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for _ in 0..cfg.iterations {
        let picks = sample(&mut rng, pairs.len(), cfg.min_sample);
        let sample_src: Vec<_> = picks.iter().map(|i| src_of(&pairs[i])).collect();
        let sample_tgt: Vec<_> = picks.iter().map(|i| tgt_of(&pairs[i])).collect();
        let Ok((matrix, translation)) = fit_rst_linear(&sample_src, &sample_tgt) else {
            continue;
        };
        let mut inliers = Vec::new();
        let mut total_residual = 0.0;
        for (idx, pair) in pairs.iter().enumerate() {
            let predicted = matrix * src_of(pair).coords + translation;
            let residual = (tgt_of(pair).coords - predicted).norm();
            if residual < cfg.inlier_threshold {
                inliers.push(idx);
                total_residual += residual;
            }
        }
        let better = match &best {
            None => true,
            Some((count, res, _)) => {
                inliers.len() > *count || (inliers.len() == *count && total_residual < *res)
            }
        };
        if better {
            best = Some((inliers.len(), total_residual, inliers));
        }
    }

    let Some((count, _, inliers)) = best else {
        return Err(Error::RegistrationFailure(
            "all RANSAC samples were degenerate".into(),
        ));
    };
    if count < cfg.min_sample {
        return Err(Error::RegistrationFailure(format!(
            "no consensus: best sample had {count} inliers"
        )));
    }

    // Refit on all inliers and force the matrix onto a proper similarity.
    let in_src: Vec<_> = inliers.iter().map(|&i| src_of(&pairs[i])).collect();
    let in_tgt: Vec<_> = inliers.iter().map(|&i| tgt_of(&pairs[i])).collect();
    let (matrix, translation) = fit_rst_linear(&in_src, &in_tgt)?;
    let det = matrix.determinant();
    if det <= 0.0 {
        return Err(Error::RegistrationFailure(
            "inlier refit produced a reflection".into(),
        ));
    }
    let scale = det.cbrt();
    let rotation = project_rotation(&(matrix / scale));
    let pose = SimilarityPose::new(scale, rotation, translation)?;
    Ok((pose, inliers))
}

/// Three-step correspondence setup: map the source through the pose, find
/// the nearest target point, accept if closer than the threshold.
pub fn build_correspondences(
    pose: &SimilarityPose,
    source: &PointCloud,
    target: &PointCloud,
    threshold: f64,
) -> CorrespondenceSet {
    let nn = NearestNeighbor::new(&target.points);
    let mut pairs = Vec::new();
    for (i, p) in source.points.iter().enumerate() {
        let moved = pose.apply_point(p);
        if let Some((j, dist)) = nn.nearest(&moved) {
            if dist < threshold {
                pairs.push(Correspondence {
                    source: i,
                    target: j,
                    distance: dist,
                });
            }
        }
    }
    CorrespondenceSet { pairs, threshold }
}

/// Normalized Frobenius difference between two rotations:
/// || R_est/|R_est| - R_gt/|R_gt| ||.
pub fn rotation_error(estimated: &Matrix3<f64>, ground_truth: &Matrix3<f64>) -> Result<f64> {
    let (ne, ng) = (estimated.norm(), ground_truth.norm());
    if ne == 0.0 || ng == 0.0 {
        return Err(Error::Empty("rotation_error of a zero matrix".into()));
    }
    Ok((estimated / ne - ground_truth / ng).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{rot_y_deg, rot_z_deg};
    use approx::assert_relative_eq;

    fn box_cloud(n_per_axis: usize) -> PointCloud {
        let mut points = Vec::new();
        for i in 0..n_per_axis {
            for j in 0..n_per_axis {
                for k in 0..n_per_axis {
                    points.push(Point3::new(
                        i as f64 * 0.7,
                        j as f64 * 1.1,
                        (k as f64 * 0.5) + 0.13 * (i as f64 * j as f64).sin(),
                    ));
                }
            }
        }
        PointCloud::new(points).unwrap()
    }

    #[test]
    fn icp_identity_on_equal_clouds() {
        let cloud = box_cloud(4);
        let pose = icp_align(&cloud, &cloud, 50, 1e-12).unwrap();
        assert!((pose.rotation - Matrix3::identity()).norm() < 1e-9);
        assert!(pose.translation.norm() < 1e-9);
        assert_relative_eq!(pose.scale, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn icp_recovers_small_rotation() {
        let cloud = box_cloud(5);
        let truth = SimilarityPose::new(1.0, rot_y_deg(10.0), Vector3::zeros()).unwrap();
        let target = truth.apply(&cloud);
        let pose = icp_align(&cloud, &target, 100, 1e-14).unwrap();
        assert!((pose.rotation - truth.rotation).norm() < 1e-6);
        assert_relative_eq!(pose.euler_deg.1, 10.0, epsilon = 1e-6);
    }

    #[test]
    fn icp_recovers_scale() {
        let cloud = box_cloud(4);
        let truth = SimilarityPose::new(1.5, Matrix3::identity(), Vector3::zeros()).unwrap();
        let target = truth.apply(&cloud);
        let pose = icp_align(&cloud, &target, 100, 1e-14).unwrap();
        assert_relative_eq!(pose.scale, 1.5, epsilon = 1e-6);
    }

    #[test]
    fn rst_linear_identity_and_roundtrip() {
        let cloud = box_cloud(3);
        let (m, t) = fit_rst_linear(&cloud.points, &cloud.points).unwrap();
        assert!((m - Matrix3::identity()).norm() < 1e-12);
        assert!(t.norm() < 1e-12);

        let truth = SimilarityPose::new(2.0, rot_z_deg(30.0), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let target: Vec<_> = cloud.points.iter().map(|p| truth.apply_point(p)).collect();
        let (m, t) = fit_rst_linear(&cloud.points, &target).unwrap();
        assert!((m - 2.0 * rot_z_deg(30.0)).norm() < 1e-9);
        assert!((t - truth.translation).norm() < 1e-9);
    }

    #[test]
    fn rst_linear_rejects_coplanar_points() {
        let flat: Vec<_> = (0..6)
            .map(|i| Point3::new(i as f64, (i * i) as f64, 0.0))
            .collect();
        assert!(matches!(
            fit_rst_linear(&flat, &flat),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn decompose_identity_and_roundtrips() {
        let (s, a, b, g) = decompose_rotation(&Matrix3::identity()).unwrap();
        assert_eq!((s, a, b, g), (1.0, 0.0, 0.0, 0.0));

        let (s, a, b, g) = decompose_rotation(&rot_y_deg(20.0)).unwrap();
        assert_relative_eq!(s, 1.0, epsilon = 1e-9);
        assert!(a.abs() < 1e-6 && g.abs() < 1e-6);
        assert_relative_eq!(b, 20.0, epsilon = 1e-6);

        let m = 2.0 * rot_xyz_deg(5.0, 10.0, 15.0);
        let (s, a, b, g) = decompose_rotation(&m).unwrap();
        assert_relative_eq!(s, 2.0, epsilon = 1e-9);
        assert_relative_eq!(a, 5.0, epsilon = 1e-6);
        assert_relative_eq!(b, 10.0, epsilon = 1e-6);
        assert_relative_eq!(g, 15.0, epsilon = 1e-6);
    }

    #[test]
    fn decompose_rejects_non_similarities() {
        let mut reflection = Matrix3::identity();
        reflection[(2, 2)] = -1.0;
        assert!(decompose_rotation(&reflection).is_err());

        let aniso = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 1.5));
        assert!(matches!(
            decompose_rotation(&aniso),
            Err(Error::NotSimilarity(_))
        ));
    }

    #[test]
    fn correspondences_exact_and_disjoint() {
        let cloud = box_cloud(3);
        let pose = SimilarityPose::new(1.0, rot_y_deg(25.0), Vector3::new(0.2, 0.0, -0.4)).unwrap();
        let target = pose.apply(&cloud);
        let corr = build_correspondences(&pose, &cloud, &target, 1.0);
        assert_eq!(corr.len(), cloud.len());
        assert!(corr.pairs.iter().all(|c| c.distance < 1e-9));

        let far = PointCloud::new(vec![Point3::new(1e6, 1e6, 1e6); 5]).unwrap();
        let corr = build_correspondences(&SimilarityPose::identity(), &cloud, &far, 1.0);
        assert!(corr.is_empty());
    }

    #[test]
    fn ransac_clean_and_contaminated() {
        let cloud = box_cloud(5);
        let truth =
            SimilarityPose::from_euler_deg(1.2, 8.0, -15.0, 22.0, Vector3::new(0.5, -1.0, 2.0))
                .unwrap();
        let target = truth.apply(&cloud);
        let mut pairs: Vec<Correspondence> = (0..cloud.len())
            .map(|i| Correspondence {
                source: i,
                target: i,
                distance: 0.0,
            })
            .collect();
        let cfg = RansacConfig {
            seed: 42,
            ..Default::default()
        };
        let corr = CorrespondenceSet {
            pairs: pairs.clone(),
            threshold: 1.0,
        };
        let (pose, inliers) = ransac_rst(&cloud, &target, &corr, &cfg).unwrap();
        assert_eq!(inliers.len(), cloud.len());
        assert!((pose.rotation - truth.rotation).norm() < 1e-9);

        // Corrupt 20% of the matches.
        let n_bad = cloud.len() / 5;
        for k in 0..n_bad {
            pairs[k * 5].target = (k * 5 + 37) % cloud.len();
        }
        let corr = CorrespondenceSet {
            pairs,
            threshold: 1.0,
        };
        let (pose, inliers) = ransac_rst(&cloud, &target, &corr, &cfg).unwrap();
        assert!(inliers.len() >= cloud.len() - n_bad);
        assert!((pose.rotation - truth.rotation).norm() < 1e-5);
        assert_relative_eq!(pose.scale, truth.scale, epsilon = 1e-5);
    }

    #[test]
    fn ransac_fails_without_consensus() {
        let cloud = box_cloud(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let random_target = PointCloud::new(
            (0..cloud.len())
                .map(|_| {
                    Point3::new(
                        rng.random_range(-100.0..100.0),
                        rng.random_range(-100.0..100.0),
                        rng.random_range(-100.0..100.0),
                    )
                })
                .collect(),
        )
        .unwrap();
        let pairs = (0..cloud.len())
            .map(|i| Correspondence {
                source: i,
                target: i,
                distance: 0.0,
            })
            .collect();
        let corr = CorrespondenceSet {
            pairs,
            threshold: 1.0,
        };
        let cfg = RansacConfig {
            inlier_threshold: 1e-3,
            seed: 1,
            ..Default::default()
        };
        assert!(matches!(
            ransac_rst(&cloud, &random_target, &corr, &cfg),
            Err(Error::RegistrationFailure(_))
        ));
    }

    #[test]
    fn rotation_error_cases() {
        let identity = Matrix3::identity();
        assert_eq!(rotation_error(&identity, &identity).unwrap(), 0.0);
        // Frozen regression value: || I/sqrt(3) - Ry(20)/sqrt(3) ||_F
        // = 2 sqrt((1 - cos 20) / 3).
        let expected = 2.0 * ((1.0 - 20f64.to_radians().cos()) / 3.0).sqrt();
        let err = rotation_error(&identity, &rot_y_deg(20.0)).unwrap();
        assert_relative_eq!(err, expected, epsilon = 1e-12);
        assert_relative_eq!(err, 0.28356, epsilon = 1e-4);
        assert!(rotation_error(&Matrix3::zeros(), &identity).is_err());
    }
}
