//! Spherical-harmonics Lambertian shading: per-channel 4x4 quadratic forms
//! built from 9 SH coefficients, forward rendering of log-shading, and the
//! Gaussian lighting prior.

use nalgebra::{DMatrix, DVector, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Grid2D, LogShadingImage, NormalField};

pub const C1: f64 = 0.429043;
pub const C2: f64 = 0.511664;
pub const C3: f64 = 0.743125;
pub const C4: f64 = 0.886227;
pub const C5: f64 = 0.247708;

/// SH lighting: 27 coefficients (channel-major) plus the three derived
/// symmetric 4x4 matrices, one per RGB channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ShLighting {
    coefficients: [[f64; 9]; 3],
    matrices: [Matrix4<f64>; 3],
}

impl ShLighting {
    /// Build the per-channel quadratic forms from 27 coefficients
    /// (channel-major: 9 for R, then G, then B).
    pub fn from_coefficients(coefficients: &[f64]) -> Result<Self> {
        if coefficients.len() != 27 {
            return Err(Error::Dimension(format!(
                "lighting expects 27 coefficients, got {}",
                coefficients.len()
            )));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("lighting coefficients".into()));
        }
        let mut channels = [[0.0; 9]; 3];
        for (j, chunk) in coefficients.chunks_exact(9).enumerate() {
            channels[j].copy_from_slice(chunk);
        }
        let matrices = [
            quadratic_form(&channels[0]),
            quadratic_form(&channels[1]),
            quadratic_form(&channels[2]),
        ];
        Ok(Self {
            coefficients: channels,
            matrices,
        })
    }

    pub fn coefficients_flat(&self) -> Vec<f64> {
        self.coefficients.iter().flatten().copied().collect()
    }

    pub fn channel(&self, j: usize) -> &[f64; 9] {
        &self.coefficients[j]
    }

    pub fn matrix(&self, j: usize) -> &Matrix4<f64> {
        &self.matrices[j]
    }

    /// Log-intensity of one channel for a unit normal: [n, 1]^T M_j [n, 1].
    pub fn log_shading_channel(&self, j: usize, normal: &Vector3<f64>) -> f64 {
        let n_hat = Vector4::new(normal.x, normal.y, normal.z, 1.0);
        (n_hat.transpose() * self.matrices[j] * n_hat)[(0, 0)]
    }

    /// Log-intensities of all three channels for a unit normal.
    pub fn log_shading(&self, normal: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            self.log_shading_channel(0, normal),
            self.log_shading_channel(1, normal),
            self.log_shading_channel(2, normal),
        )
    }

    /// Render a log-shading image from a normal field; the mask is copied.
    pub fn render(&self, normals: &NormalField) -> LogShadingImage {
        let grid = normals.grid.map(|n| self.log_shading(n));
        // Rendered values are finite because the coefficients are.
        LogShadingImage::new(grid).expect("rendered shading is finite")
    }
}

/// The 4x4 matrix of one channel from its 9 SH coefficients.
///
/// Coefficient ordering: L1 DC, L2..L4 linear, L5..L9 quadratic.
fn quadratic_form(l: &[f64; 9]) -> Matrix4<f64> {
    Matrix4::new(
        C1 * l[8], C1 * l[4], C1 * l[7], C2 * l[3],
        C1 * l[4], -C1 * l[8], C1 * l[5], C2 * l[1],
        C1 * l[7], C1 * l[5], C3 * l[6], C2 * l[2],
        C2 * l[3], C2 * l[1], C2 * l[2], C4 * l[0] - C5 * l[6],
    )
}

/// Multivariate Gaussian prior over the 27-dimensional lighting vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LightingPrior {
    pub mean: Vec<f64>,
    /// Row-major 27x27 precision matrix (inverse covariance).
    pub precision: Vec<f64>,
    pub weight: f64,
}

impl LightingPrior {
    /// Prior disabled: zero weight, arbitrary-but-valid mean and precision.
    pub fn disabled() -> Self {
        Self {
            mean: vec![0.0; 27],
            precision: identity_flat(27),
            weight: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != 27 || self.precision.len() != 27 * 27 {
            return Err(Error::Dimension(
                "lighting prior expects a 27-vector mean and 27x27 precision".into(),
            ));
        }
        if self.weight < 0.0 {
            return Err(Error::Config("lighting prior weight must be >= 0".into()));
        }
        let m = DMatrix::from_row_slice(27, 27, &self.precision);
        if (m.clone() - m.transpose()).norm() > 1e-9 {
            return Err(Error::Config("lighting prior precision is not symmetric".into()));
        }
        Ok(())
    }

    /// weight * (L - mu)^T Sigma^-1 (L - mu).
    pub fn cost(&self, coefficients: &[f64]) -> Result<f64> {
        self.validate()?;
        if coefficients.len() != 27 {
            return Err(Error::Dimension(format!(
                "lighting prior expects 27 coefficients, got {}",
                coefficients.len()
            )));
        }
        let delta = DVector::from_iterator(
            27,
            coefficients.iter().zip(&self.mean).map(|(c, m)| c - m),
        );
        let precision = DMatrix::from_row_slice(27, 27, &self.precision);
        Ok(self.weight * (delta.transpose() * precision * &delta)[(0, 0)])
    }
}

fn identity_flat(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// Render shading for a grid of normals given as raw vectors (test helper
/// for callers without a full NormalField).
pub fn render_from_grid(lighting: &ShLighting, normals: &Grid2D<Vector3<f64>>) -> LogShadingImage {
    LogShadingImage::new(normals.map(|n| lighting.log_shading(n))).expect("finite shading")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn single_coefficient(channel: usize, index: usize, value: f64) -> ShLighting {
        let mut l = vec![0.0; 27];
        l[channel * 9 + index] = value;
        ShLighting::from_coefficients(&l).unwrap()
    }

    #[test]
    fn zero_lighting_gives_zero_matrices() {
        let lighting = ShLighting::from_coefficients(&[0.0; 27]).unwrap();
        for j in 0..3 {
            assert_eq!(lighting.matrix(j).norm(), 0.0);
        }
    }

    #[test]
    fn dc_coefficient_hits_only_corner_entry() {
        let lighting = single_coefficient(0, 0, 1.0);
        let m = lighting.matrix(0);
        assert_eq!(m[(3, 3)], C4);
        assert_eq!(m.norm(), C4);
    }

    #[test]
    fn l5_fills_the_xy_offdiagonal() {
        let lighting = single_coefficient(1, 4, 1.0);
        let m = lighting.matrix(1);
        assert_eq!(m[(0, 1)], C1);
        assert_eq!(m[(1, 0)], C1);
        assert_relative_eq!(m.norm(), (2.0f64).sqrt() * C1, epsilon = 1e-15);
    }

    #[test]
    fn matrices_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l: Vec<f64> = (0..27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lighting = ShLighting::from_coefficients(&l).unwrap();
        for j in 0..3 {
            let m = lighting.matrix(j);
            assert!((m - m.transpose()).norm() <= 1e-12);
        }
    }

    #[test]
    fn render_hand_values_at_up_normal() {
        let up = Vector3::new(0.0, 0.0, 1.0);
        let dc = single_coefficient(2, 0, 1.0);
        assert_relative_eq!(dc.log_shading_channel(2, &up), C4, epsilon = 1e-15);

        // L7 contributes c3*n_z^2 - c5.
        let l7 = single_coefficient(0, 6, 1.0);
        assert_relative_eq!(l7.log_shading_channel(0, &up), C3 - C5, epsilon = 1e-12);
        assert_relative_eq!(l7.log_shading_channel(0, &up), 0.495417, epsilon = 1e-6);
    }

    #[test]
    fn render_is_linear_in_lighting() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let la: Vec<f64> = (0..27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lb: Vec<f64> = (0..27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sum: Vec<f64> = la.iter().zip(&lb).map(|(a, b)| a + b).collect();
        let (l1, l2, ls) = (
            ShLighting::from_coefficients(&la).unwrap(),
            ShLighting::from_coefficients(&lb).unwrap(),
            ShLighting::from_coefficients(&sum).unwrap(),
        );
        for _ in 0..20 {
            let n = random_unit(&mut rng);
            let lhs = ls.log_shading(&n);
            let rhs = l1.log_shading(&n) + l2.log_shading(&n);
            assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn render_matches_explicit_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let l: Vec<f64> = (0..27).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lighting = ShLighting::from_coefficients(&l).unwrap();
            let n = random_unit(&mut rng);
            let n_hat = [n.x, n.y, n.z, 1.0];
            for j in 0..3 {
                let m = lighting.matrix(j);
                let mut explicit = 0.0;
                for a in 0..4 {
                    for b in 0..4 {
                        explicit += n_hat[a] * m[(a, b)] * n_hat[b];
                    }
                }
                assert_relative_eq!(
                    lighting.log_shading_channel(j, &n),
                    explicit,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn prior_cost_cases() {
        let prior = LightingPrior {
            mean: vec![0.5; 27],
            precision: identity_flat(27),
            weight: 1.0,
        };
        assert_eq!(prior.cost(&vec![0.5; 27]).unwrap(), 0.0);

        let disabled = LightingPrior::disabled();
        assert_eq!(disabled.cost(&vec![9.0; 27]).unwrap(), 0.0);

        let mut l = vec![0.5; 27];
        l[0] += 1.0;
        assert_relative_eq!(prior.cost(&l).unwrap(), 1.0, epsilon = 1e-15);

        assert!(prior.cost(&[0.0; 5]).is_err());
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.05..1.0),
            );
            if v.norm() > 1e-3 {
                return v.normalize();
            }
        }
    }
}
