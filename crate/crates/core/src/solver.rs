//! Small dense Levenberg-Marquardt solver shared by the per-pixel SfS
//! problems and the Euler-angle fit.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when the objective (sum of squared residuals) drops below this.
    pub objective_tolerance: f64,
    /// Stop when the step norm drops below this.
    pub step_tolerance: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            objective_tolerance: 1e-16,
            step_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Damped Gauss-Newton with a trust-region style lambda schedule.
///
/// `eval` returns the residual vector and its Jacobian at a point. The best
/// iterate seen is always returned, so the outcome never has a larger
/// objective than the start.
pub fn levenberg_marquardt(
    x0: DVector<f64>,
    mut eval: impl FnMut(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
    opts: &LmOptions,
) -> LmOutcome {
    let n = x0.len();
    let mut x = x0;
    let (mut residuals, mut jacobian) = eval(&x);
    let mut objective = residuals.norm_squared();
    let mut best_x = x.clone();
    let mut best_objective = objective;

    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = objective <= opts.objective_tolerance;

    while !converged && iterations < opts.max_iterations {
        iterations += 1;
        let jtj = jacobian.transpose() * &jacobian;
        let jtr = jacobian.transpose() * &residuals;

        // Scale-invariant damping on the diagonal.
        let mut damped = jtj.clone();
        for i in 0..n {
            damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
        }
        let step = match damped.cholesky() {
            Some(chol) => chol.solve(&(-&jtr)),
            None => {
                lambda *= 10.0;
                continue;
            }
        };

        let candidate = &x + &step;
        let (cand_res, cand_jac) = eval(&candidate);
        let cand_objective = cand_res.norm_squared();

        if cand_objective < objective {
            let step_norm = step.norm();
            x = candidate;
            residuals = cand_res;
            jacobian = cand_jac;
            objective = cand_objective;
            lambda = (lambda * 0.3).max(1e-12);
            if objective < best_objective {
                best_objective = objective;
                best_x = x.clone();
            }
            if objective <= opts.objective_tolerance || step_norm <= opts.step_tolerance {
                converged = true;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }

    LmOutcome {
        x: best_x,
        objective: best_objective,
        iterations,
        converged: converged || best_objective <= opts.objective_tolerance,
    }
}
