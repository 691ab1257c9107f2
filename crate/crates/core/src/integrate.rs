//! Depth reconstruction from a normal field: invert the normals to surface
//! gradients and solve the gradient PDE system in the least-squares sense.

use crate::error::{Error, Result};
use crate::types::{DepthGrid, Grid2D, NormalField};

/// Per-pixel surface gradients (p, q) = (dz/dx, dz/dy).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub grid: Grid2D<[f64; 2]>,
}

/// Normals with n_z below this are treated as grazing and masked out.
pub const GRAZING_EPS: f64 = 1e-3;

/// Algebraic inversion p = -n_x/n_z, q = -n_y/n_z.
pub fn normals_to_gradients(normals: &NormalField) -> GradientField {
    normals_to_gradients_eps(normals, GRAZING_EPS)
}

pub fn normals_to_gradients_eps(normals: &NormalField, eps: f64) -> GradientField {
    let (w, h) = (normals.width(), normals.height());
    let mut values = vec![[0.0; 2]; w * h];
    let mut mask = vec![false; w * h];
    for (x, y, n) in normals.grid.iter_valid() {
        if n.z >= eps {
            let i = y * w + x;
            values[i] = [-n.x / n.z, -n.y / n.z];
            mask[i] = true;
        }
    }
    GradientField {
        grid: Grid2D::new(w, h, values, mask).expect("shape is consistent"),
    }
}

/// One finite-difference equation: z[plus] and z[minus] differ by
/// `scale * target`.
struct Equation {
    plus: usize,
    minus: usize,
    inv_step: f64,
    target: f64,
}

/// Least-squares surface from gradients.
///
/// Minimizes sum (Dx z - p)^2 + (Dy z - q)^2 with the same stencils used by
/// depth differentiation (central on interior pixels, one-sided at borders),
/// so differentiate-then-integrate roundtrips are exact up to the gauge.
/// Each 4-connected component is solved independently and fixed to zero mean.
pub fn integrate_gradients(grads: &GradientField, pitch_x: f64, pitch_y: f64) -> Result<DepthGrid> {
    if !(pitch_x > 0.0 && pitch_y > 0.0) {
        return Err(Error::Config("pixel pitch must be positive".into()));
    }
    let (w, h) = (grads.grid.width(), grads.grid.height());
    let mask = grads.grid.mask();

    let equations = collect_equations(grads, pitch_x, pitch_y);
    // Unknowns are the pixels actually constrained by some equation;
    // anything else has no information and stays masked out.
    let mut touched = vec![false; w * h];
    for eq in &equations {
        touched[eq.plus] = true;
        touched[eq.minus] = true;
    }

    let mut depth = vec![0.0; w * h];
    let mut out_mask = vec![false; w * h];
    for component in connected_components(w, h, &touched) {
        solve_component(&component, &equations, &mut depth)?;
        for &i in &component {
            out_mask[i] = true;
        }
    }

    let _ = mask;
    DepthGrid::new(Grid2D::new(w, h, depth, out_mask)?, pitch_x, pitch_y)
}

fn collect_equations(grads: &GradientField, pitch_x: f64, pitch_y: f64) -> Vec<Equation> {
    let (w, h) = (grads.grid.width(), grads.grid.height());
    let valid = |x: usize, y: usize| grads.grid.is_valid(x, y);
    let mut equations = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !valid(x, y) {
                continue;
            }
            let [p, q] = *grads.grid.value_unchecked(x, y);
            // x stencil
            if x > 0 && x + 1 < w {
                if valid(x - 1, y) && valid(x + 1, y) {
                    equations.push(Equation {
                        plus: y * w + x + 1,
                        minus: y * w + x - 1,
                        inv_step: 1.0 / (2.0 * pitch_x),
                        target: p,
                    });
                }
            } else if w >= 2 {
                let (xm, xp) = if x == 0 { (0, 1) } else { (w - 2, w - 1) };
                if valid(xm, y) && valid(xp, y) {
                    equations.push(Equation {
                        plus: y * w + xp,
                        minus: y * w + xm,
                        inv_step: 1.0 / pitch_x,
                        target: p,
                    });
                }
            }
            // y stencil
            if y > 0 && y + 1 < h {
                if valid(x, y - 1) && valid(x, y + 1) {
                    equations.push(Equation {
                        plus: (y + 1) * w + x,
                        minus: (y - 1) * w + x,
                        inv_step: 1.0 / (2.0 * pitch_y),
                        target: q,
                    });
                }
            } else if h >= 2 {
                let (ym, yp) = if y == 0 { (0, 1) } else { (h - 2, h - 1) };
                if valid(x, ym) && valid(x, yp) {
                    equations.push(Equation {
                        plus: yp * w + x,
                        minus: ym * w + x,
                        inv_step: 1.0 / pitch_y,
                        target: q,
                    });
                }
            }
        }
    }
    equations
}

fn connected_components(w: usize, h: usize, mask: &[bool]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; w * h];
    let mut components = Vec::new();
    for start in 0..w * h {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut component = Vec::new();
        seen[start] = true;
        while let Some(i) = stack.pop() {
            component.push(i);
            let (x, y) = (i % w, i / w);
            let mut push = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        components.push(component);
    }
    components
}

/// Conjugate gradients on the normal equations of one component, with the
/// constant (gauge) mode projected out.
fn solve_component(component: &[usize], equations: &[Equation], depth: &mut [f64]) -> Result<()> {
    let n = component.len();
    let mut local_index = std::collections::HashMap::with_capacity(n);
    for (k, &i) in component.iter().enumerate() {
        local_index.insert(i, k);
    }
    let eqs: Vec<(usize, usize, f64, f64)> = equations
        .iter()
        .filter_map(|eq| {
            let plus = *local_index.get(&eq.plus)?;
            let minus = *local_index.get(&eq.minus)?;
            Some((plus, minus, eq.inv_step, eq.target))
        })
        .collect();
    if eqs.is_empty() {
        return Ok(());
    }

    // A^T A z applied matrix-free; A rows are inv_step * (z[plus] - z[minus]).
    let apply = |z: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &(plus, minus, inv_step, _) in &eqs {
            let r = inv_step * (z[plus] - z[minus]);
            out[plus] += inv_step * r;
            out[minus] -= inv_step * r;
        }
    };
    let mut rhs = vec![0.0; n];
    for &(plus, minus, inv_step, target) in &eqs {
        rhs[plus] += inv_step * target;
        rhs[minus] -= inv_step * target;
    }
    project_out_mean(&mut rhs);

    let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut z = vec![0.0; n];
    if rhs_norm > 0.0 {
        let mut residual = rhs.clone();
        let mut direction = residual.clone();
        let mut az = vec![0.0; n];
        let mut rr = rhs_norm * rhs_norm;
        let max_iter = (20 * n).max(200);
        for _ in 0..max_iter {
            apply(&direction, &mut az);
            project_out_mean(&mut az);
            let da = direction
                .iter()
                .zip(&az)
                .map(|(d, a)| d * a)
                .sum::<f64>();
            if da <= 0.0 {
                break;
            }
            let alpha = rr / da;
            for k in 0..n {
                z[k] += alpha * direction[k];
                residual[k] -= alpha * az[k];
            }
            let rr_new = residual.iter().map(|v| v * v).sum::<f64>();
            if rr_new.sqrt() <= 1e-14 * rhs_norm.max(1.0) {
                break;
            }
            let beta = rr_new / rr;
            rr = rr_new;
            for k in 0..n {
                direction[k] = residual[k] + beta * direction[k];
            }
        }
        // Verify the normal-equations residual bound.
        apply(&z, &mut az);
        project_out_mean(&mut az);
        let defect = az
            .iter()
            .zip(&rhs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if defect > 1e-8 * rhs_norm.max(1.0) {
            return Err(Error::Solver(format!(
                "integration normal equations stalled at relative residual {:.3e}",
                defect / rhs_norm.max(1.0)
            )));
        }
    }

    project_out_mean(&mut z);
    for (k, &i) in component.iter().enumerate() {
        depth[i] = z[k];
    }
    Ok(())
}

fn project_out_mean(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

/// Residual of the gradient equations for a given depth (diagnostic; the
/// least-squares solution of non-integrable fields has nonzero residual).
pub fn gradient_residual(grads: &GradientField, depth: &DepthGrid) -> f64 {
    let equations = collect_equations(grads, depth.pitch_x, depth.pitch_y);
    let z = depth.grid.values();
    equations
        .iter()
        .map(|eq| {
            let r = eq.inv_step * (z[eq.plus] - z[eq.minus]) - eq.target;
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

/// Convenience: depth from a normal field in one call.
pub fn normals_to_depth(normals: &NormalField, pitch_x: f64, pitch_y: f64) -> Result<DepthGrid> {
    integrate_gradients(&normals_to_gradients(normals), pitch_x, pitch_y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn full_gradients(w: usize, h: usize, f: impl Fn(usize, usize) -> [f64; 2]) -> GradientField {
        let values = (0..w * h).map(|i| f(i % w, i / w)).collect();
        GradientField {
            grid: Grid2D::new(w, h, values, vec![true; w * h]).unwrap(),
        }
    }

    fn depth_from(w: usize, h: usize, f: impl Fn(f64, f64) -> f64) -> DepthGrid {
        let values = (0..w * h)
            .map(|i| f((i % w) as f64, (i / w) as f64))
            .collect();
        DepthGrid::new(Grid2D::new(w, h, values, vec![true; w * h]).unwrap(), 1.0, 1.0).unwrap()
    }

    #[test]
    fn gradient_inversion_hand_values() {
        let up = Vector3::new(0.0, 0.0, 1.0);
        let tilted = Vector3::new(-1.0, 0.0, 1.0) / 2.0_f64.sqrt();
        let grid = Grid2D::new(2, 1, vec![up, tilted], vec![true; 2]).unwrap();
        let normals = NormalField::new(grid).unwrap();
        let grads = normals_to_gradients(&normals);
        assert_eq!(*grads.grid.value_unchecked(0, 0), [0.0, 0.0]);
        let [p, q] = *grads.grid.value_unchecked(1, 0);
        assert!((p - 1.0).abs() < 1e-12 && q.abs() < 1e-12);
    }

    #[test]
    fn grazing_normals_are_masked_out() {
        let nz = 1e-4;
        let grazing = Vector3::new((1.0 - nz * nz).sqrt(), 0.0, nz);
        let grid = Grid2D::new(1, 1, vec![grazing], vec![true]).unwrap();
        let normals = NormalField::new(grid).unwrap();
        let grads = normals_to_gradients(&normals);
        assert_eq!(grads.grid.valid_count(), 0);
    }

    #[test]
    fn zero_gradients_integrate_to_zero() {
        let grads = full_gradients(8, 8, |_, _| [0.0, 0.0]);
        let depth = integrate_gradients(&grads, 1.0, 1.0).unwrap();
        for (_, _, z) in depth.grid.iter_valid() {
            assert!(z.abs() < 1e-10);
        }
    }

    #[test]
    fn constant_gradients_integrate_to_a_plane() {
        let (a, b) = (0.3, -0.7);
        let grads = full_gradients(10, 10, |_, _| [a, b]);
        let depth = integrate_gradients(&grads, 1.0, 1.0).unwrap();
        // Expected plane with the same zero-mean gauge.
        let mean = a * 4.5 + b * 4.5;
        for (x, y, z) in depth.grid.iter_valid() {
            let expected = a * x as f64 + b * y as f64 - mean;
            assert!((z - expected).abs() < 1e-9, "({x},{y}): {z} vs {expected}");
        }
    }

    #[test]
    fn roundtrip_smooth_surface() {
        let source = depth_from(32, 32, |x, y| {
            3.0 * (-((x - 16.0).powi(2) + (y - 16.0).powi(2)) / 60.0).exp()
                + 0.5 * (0.3 * x).sin()
        });
        let normals = source.normals().unwrap();
        let depth = normals_to_depth(&normals, 1.0, 1.0).unwrap();
        let mean_src: f64 = source.grid.values().iter().sum::<f64>() / 1024.0;
        let mut sq = 0.0;
        let mut count = 0;
        for (x, y, z) in depth.grid.iter_valid() {
            let diff = z - (source.grid.value_unchecked(x, y) - mean_src);
            sq += diff * diff;
            count += 1;
        }
        let rmse = (sq / count as f64).sqrt();
        assert!(rmse <= 1e-6, "roundtrip RMSE {rmse}");
    }

    #[test]
    fn integration_is_linear() {
        let g1 = full_gradients(9, 9, |x, y| [0.1 * (x as f64).sin(), 0.05 * y as f64]);
        let g2 = full_gradients(9, 9, |x, y| [0.02 * (x as f64), 0.1 * (y as f64).cos()]);
        let (alpha, beta) = (2.0, -0.5);
        let combined = full_gradients(9, 9, |x, y| {
            let a = g1.grid.value_unchecked(x, y);
            let b = g2.grid.value_unchecked(x, y);
            [alpha * a[0] + beta * b[0], alpha * a[1] + beta * b[1]]
        });
        let z1 = integrate_gradients(&g1, 1.0, 1.0).unwrap();
        let z2 = integrate_gradients(&g2, 1.0, 1.0).unwrap();
        let zc = integrate_gradients(&combined, 1.0, 1.0).unwrap();
        for (x, y, z) in zc.grid.iter_valid() {
            let expected =
                alpha * z1.grid.value_unchecked(x, y) + beta * z2.grid.value_unchecked(x, y);
            assert!((z - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn non_integrable_field_still_solves() {
        // Curl field (p, q) = (-y, x) has no exact potential.
        let grads = full_gradients(12, 12, |x, y| [-(y as f64), x as f64]);
        let depth = integrate_gradients(&grads, 1.0, 1.0).unwrap();
        assert_eq!(depth.grid.valid_count(), 144);
        assert!(gradient_residual(&grads, &depth) > 0.0);
    }

    #[test]
    fn disconnected_components_each_get_zero_mean() {
        let mut mask = vec![true; 8 * 8];
        for y in 0..8 {
            mask[y * 8 + 3] = false;
            mask[y * 8 + 4] = false;
        }
        let values = vec![[0.5, 0.0]; 64];
        let grads = GradientField {
            grid: Grid2D::new(8, 8, values, mask).unwrap(),
        };
        let depth = integrate_gradients(&grads, 1.0, 1.0).unwrap();
        for x_range in [0..3usize, 5..8usize] {
            let mut sum = 0.0;
            let mut count = 0;
            for y in 0..8 {
                for x in x_range.clone() {
                    if let Some(z) = depth.grid.get(x, y) {
                        sum += z;
                        count += 1;
                    }
                }
            }
            assert!(count > 0);
            assert!((sum / count as f64).abs() < 1e-9);
        }
    }
}
