//! Shared value types: masked grids, depth maps, normal fields, point clouds
//! and similarity poses.

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};

/// Rectangular raster of values with a per-pixel validity mask.
///
/// Masked-out pixels are holes: they are skipped by every reduction, never
/// read as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D<V> {
    width: usize,
    height: usize,
    values: Vec<V>,
    mask: Vec<bool>,
}

impl<V: Clone> Grid2D<V> {
    pub fn new(width: usize, height: usize, values: Vec<V>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || mask.len() != width * height {
            return Err(Error::Dimension(format!(
                "grid {}x{} expects {} values, got {} values / {} mask entries",
                width,
                height,
                width * height,
                values.len(),
                mask.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            mask,
        })
    }

    pub fn filled(width: usize, height: usize, value: V) -> Self {
        Self {
            width,
            height,
            values: vec![value.clone(); width * height],
            mask: vec![true; width * height],
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.mask[self.index(x, y)]
    }

    /// Value at a pixel, `None` when masked out.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<&V> {
        let i = self.index(x, y);
        self.mask[i].then(|| &self.values[i])
    }

    #[inline]
    pub fn value_unchecked(&self, x: usize, y: usize) -> &V {
        &self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: V) {
        let i = self.index(x, y);
        self.values[i] = value;
        self.mask[i] = true;
    }

    pub fn mask_out(&mut self, x: usize, y: usize) {
        let i = self.index(x, y);
        self.mask[i] = false;
    }

    pub fn values(&self) -> &[V] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn same_shape<U>(&self, other: &Grid2D<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Iterate over masked-in pixels as `(x, y, value)`.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, &V)> {
        self.mask.iter().enumerate().filter_map(move |(i, m)| {
            m.then(|| {
                let (x, y) = (i % self.width, i / self.width);
                (x, y, &self.values[i])
            })
        })
    }

    pub fn map<U: Clone>(&self, f: impl Fn(&V) -> U) -> Grid2D<U> {
        Grid2D {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(&f).collect(),
            mask: self.mask.clone(),
        }
    }
}

/// Per-pixel depth with the physical pixel pitch along x and y.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthGrid {
    pub grid: Grid2D<f64>,
    pub pitch_x: f64,
    pub pitch_y: f64,
}

impl DepthGrid {
    pub fn new(grid: Grid2D<f64>, pitch_x: f64, pitch_y: f64) -> Result<Self> {
        if !(pitch_x > 0.0 && pitch_y > 0.0) {
            return Err(Error::Config(format!(
                "pixel pitch must be positive, got ({pitch_x}, {pitch_y})"
            )));
        }
        for (x, y, z) in grid.iter_valid() {
            if !z.is_finite() {
                return Err(Error::NonFinite(format!("depth at ({x}, {y})")));
            }
        }
        Ok(Self {
            grid,
            pitch_x,
            pitch_y,
        })
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    /// Finite-difference depth derivative along x at a pixel.
    ///
    /// Central difference on interior pixels, one-sided at grid borders.
    /// Returns `None` when the stencil touches a hole.
    pub fn derivative_x(&self, x: usize, y: usize) -> Option<f64> {
        derivative_1d(&self.grid, self.pitch_x, x, y, true)
    }

    /// Finite-difference depth derivative along y; same stencil rules as x.
    pub fn derivative_y(&self, x: usize, y: usize) -> Option<f64> {
        derivative_1d(&self.grid, self.pitch_y, x, y, false)
    }

    /// Surface normals from depth derivatives: n = (-p, -q, 1) normalized.
    ///
    /// Pixels whose stencil touches a hole are masked out in the result.
    pub fn normals(&self) -> Result<NormalField> {
        if self.grid.valid_count() < 4 {
            return Err(Error::Empty(
                "need at least 4 valid depth pixels to take derivatives".into(),
            ));
        }
        let (w, h) = (self.width(), self.height());
        let mut values = vec![Vector3::zeros(); w * h];
        let mut mask = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                if !self.grid.is_valid(x, y) {
                    continue;
                }
                if let (Some(p), Some(q)) = (self.derivative_x(x, y), self.derivative_y(x, y)) {
                    let norm = (1.0 + p * p + q * q).sqrt();
                    values[y * w + x] = Vector3::new(-p / norm, -q / norm, 1.0 / norm);
                    mask[y * w + x] = true;
                }
            }
        }
        NormalField::new(Grid2D::new(w, h, values, mask)?)
    }

    /// Orthographic lift of the masked-in pixels to 3D points.
    pub fn point_cloud(&self) -> PointCloud {
        let mut points = Vec::with_capacity(self.grid.valid_count());
        let mut source = Vec::with_capacity(self.grid.valid_count());
        for (x, y, z) in self.grid.iter_valid() {
            points.push(Point3::new(
                x as f64 * self.pitch_x,
                y as f64 * self.pitch_y,
                *z,
            ));
            source.push(self.grid.index(x, y));
        }
        PointCloud {
            points,
            source: Some(source),
        }
    }

    pub fn mean_depth(&self) -> Option<f64> {
        let n = self.grid.valid_count();
        (n > 0).then(|| self.grid.iter_valid().map(|(_, _, z)| z).sum::<f64>() / n as f64)
    }
}

fn derivative_1d(grid: &Grid2D<f64>, pitch: f64, x: usize, y: usize, along_x: bool) -> Option<f64> {
    let extent = if along_x { grid.width() } else { grid.height() };
    let coord = if along_x { x } else { y };
    let at = |c: usize| -> Option<f64> {
        let (gx, gy) = if along_x { (c, y) } else { (x, c) };
        grid.get(gx, gy).copied()
    };
    if !grid.is_valid(x, y) || extent < 2 {
        return None;
    }
    if coord > 0 && coord + 1 < extent {
        Some((at(coord + 1)? - at(coord - 1)?) / (2.0 * pitch))
    } else if coord == 0 {
        Some((at(1)? - at(0)?) / pitch)
    } else {
        Some((at(extent - 1)? - at(extent - 2)?) / pitch)
    }
}

/// Per-pixel unit surface normals, camera-facing (n_z > 0).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalField {
    pub grid: Grid2D<Vector3<f64>>,
}

pub const UNIT_NORM_TOL: f64 = 1e-9;

impl NormalField {
    pub fn new(grid: Grid2D<Vector3<f64>>) -> Result<Self> {
        for (x, y, n) in grid.iter_valid() {
            if (n.norm() - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Config(format!(
                    "normal at ({x}, {y}) has norm {}",
                    n.norm()
                )));
            }
            if n.z <= 0.0 {
                return Err(Error::Config(format!(
                    "normal at ({x}, {y}) is not camera-facing (n_z = {})",
                    n.z
                )));
            }
        }
        Ok(Self { grid })
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    /// Rotate every normal by the pose rotation and renormalize.
    ///
    /// Scale and translation do not act on directions.
    pub fn rotated(&self, pose: &SimilarityPose) -> Result<NormalField> {
        let rot = pose.rotation;
        let grid = self.grid.map(|n| orient_camera_facing((rot * n).normalize()));
        NormalField::new(grid)
    }

    /// Mean angular distance in degrees to another field over jointly valid pixels.
    pub fn angular_errors_deg(&self, other: &NormalField) -> Vec<f64> {
        let mut errors = Vec::new();
        for (x, y, n) in self.grid.iter_valid() {
            if let Some(m) = other.grid.get(x, y) {
                let cos = n.dot(m).clamp(-1.0, 1.0);
                errors.push(cos.acos().to_degrees());
            }
        }
        errors
    }
}

/// Flip a unit vector onto the camera-facing hemisphere.
pub fn orient_camera_facing(n: Vector3<f64>) -> Vector3<f64> {
    if n.z < 0.0 {
        -n
    } else {
        n
    }
}

/// Per-pixel RGB log-intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct LogShadingImage {
    pub grid: Grid2D<Vector3<f64>>,
}

/// Intensities are clamped here before the log, so black pixels stay finite.
pub const INTENSITY_FLOOR: f64 = 1e-6;

impl LogShadingImage {
    pub fn new(grid: Grid2D<Vector3<f64>>) -> Result<Self> {
        for (x, y, v) in grid.iter_valid() {
            if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
                return Err(Error::NonFinite(format!("log-shading at ({x}, {y})")));
            }
        }
        Ok(Self { grid })
    }

    /// Convert linear intensities to log, clamping to [`INTENSITY_FLOOR`].
    pub fn from_linear(grid: Grid2D<Vector3<f64>>) -> Result<Self> {
        LogShadingImage::new(grid.map(|v| v.map(|c| c.max(INTENSITY_FLOOR).ln())))
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }
}

/// Unstructured 3D points, optionally tagged with the pixel they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub source: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self> {
        for p in &points {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::NonFinite("point cloud coordinates".into()));
            }
        }
        Ok(Self {
            points,
            source: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Point3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.points.len() as f64))
    }
}

pub const ROTATION_TOL: f64 = 1e-9;

/// Similarity transform T(p) = s R p + t with its Euler decomposition
/// (degrees, X-Y-Z order).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityPose {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// (alpha, beta, gamma) in degrees for R = Rx(alpha) Ry(beta) Rz(gamma).
    pub euler_deg: (f64, f64, f64),
}

impl SimilarityPose {
    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {scale}")));
        }
        let det = rotation.determinant();
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if (det - 1.0).abs() > ROTATION_TOL || ortho > ROTATION_TOL {
            return Err(Error::NotSimilarity(format!(
                "rotation has det {det}, orthonormality defect {ortho}"
            )));
        }
        let euler_deg = euler_xyz_deg(&rotation);
        Ok(Self {
            scale,
            rotation,
            translation,
            euler_deg,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            euler_deg: (0.0, 0.0, 0.0),
        }
    }

    pub fn from_euler_deg(scale: f64, alpha: f64, beta: f64, gamma: f64, translation: Vector3<f64>) -> Result<Self> {
        Self::new(scale, rot_xyz_deg(alpha, beta, gamma), translation)
    }

    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.scale * (self.rotation * p.coords) + self.translation)
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud.points.iter().map(|p| self.apply_point(p)).collect(),
            source: cloud.source.clone(),
        }
    }

    pub fn inverse(&self) -> SimilarityPose {
        let rot_inv = self.rotation.transpose();
        let scale_inv = 1.0 / self.scale;
        SimilarityPose {
            scale: scale_inv,
            rotation: rot_inv,
            translation: -scale_inv * (rot_inv * self.translation),
            euler_deg: euler_xyz_deg(&rot_inv),
        }
    }
}

/// Rotation about x by `deg` degrees.
pub fn rot_x_deg(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Rotation about y by `deg` degrees.
pub fn rot_y_deg(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Rotation about z by `deg` degrees.
pub fn rot_z_deg(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// R = Rx(alpha) Ry(beta) Rz(gamma), angles in degrees.
pub fn rot_xyz_deg(alpha: f64, beta: f64, gamma: f64) -> Matrix3<f64> {
    rot_x_deg(alpha) * rot_y_deg(beta) * rot_z_deg(gamma)
}

/// Closed-form X-Y-Z Euler extraction, degrees.
pub fn euler_xyz_deg(rot: &Matrix3<f64>) -> (f64, f64, f64) {
    let beta = rot[(0, 2)].clamp(-1.0, 1.0).asin();
    let (alpha, gamma) = if rot[(0, 2)].abs() < 1.0 - 1e-12 {
        (
            (-rot[(1, 2)]).atan2(rot[(2, 2)]),
            (-rot[(0, 1)]).atan2(rot[(0, 0)]),
        )
    } else {
        // Gimbal lock: fold everything into alpha.
        (rot[(1, 0)].atan2(rot[(1, 1)]), 0.0)
    };
    (alpha.to_degrees(), beta.to_degrees(), gamma.to_degrees())
}
