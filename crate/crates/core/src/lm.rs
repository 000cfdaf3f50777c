//! Small dense Levenberg-Marquardt solver with Marquardt diagonal scaling and
//! box constraints by projection.

use nalgebra::{DMatrix, DVector};

/// A nonlinear least-squares problem `min sum_i r_i(p)^2`.
pub trait LeastSquares {
    fn num_params(&self) -> usize;
    fn num_residuals(&self) -> usize;
    fn residuals(&self, params: &[f64], out: &mut [f64]);
    /// Fills the `num_residuals x num_params` Jacobian of the residuals.
    fn jacobian(&self, params: &[f64], jac: &mut DMatrix<f64>);

    /// Clamps parameters into the feasible box.
    fn project(&self, _params: &mut [f64]) {}

    /// True when `step` is small enough to stop iterating.
    fn step_converged(&self, params: &[f64], step: &[f64]) -> bool {
        params
            .iter()
            .zip(step)
            .all(|(p, s)| s.abs() <= 1e-10 * (p.abs() + 1e-10))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmSettings {
    pub max_iterations: usize,
    /// Stop when the relative cost decrease of an accepted step falls below this.
    pub cost_tolerance: f64,
    pub initial_damping: f64,
    pub max_damping: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            cost_tolerance: 1e-10,
            initial_damping: 1e-3,
            max_damping: 1e16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmOutcome {
    pub params: Vec<f64>,
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Damping grew past its limit without finding a cost decrease.
    pub damping_exhausted: bool,
}

fn cost_of(problem: &impl LeastSquares, params: &[f64], buf: &mut [f64]) -> f64 {
    problem.residuals(params, buf);
    buf.iter().map(|r| r * r).sum()
}

/// Gradient of the cost `sum r_i^2`, i.e. `2 J^T r`.
pub fn cost_gradient(problem: &impl LeastSquares, params: &[f64]) -> Vec<f64> {
    let m = problem.num_residuals();
    let n = problem.num_params();
    let mut r = vec![0.0; m];
    problem.residuals(params, &mut r);
    let mut jac = DMatrix::zeros(m, n);
    problem.jacobian(params, &mut jac);
    let g = jac.transpose() * DVector::from_vec(r);
    g.iter().map(|v| 2.0 * v).collect()
}

pub fn minimize(problem: &impl LeastSquares, initial: &[f64], settings: &LmSettings) -> LmOutcome {
    let m = problem.num_residuals();
    let n = problem.num_params();
    let mut params = initial.to_vec();
    problem.project(&mut params);

    let mut r = vec![0.0; m];
    let mut trial_r = vec![0.0; m];
    let mut cost = cost_of(problem, &params, &mut r);
    let initial_cost = cost;
    let mut jac = DMatrix::zeros(m, n);
    let mut damping = settings.initial_damping;
    let mut converged = false;
    let mut exhausted = false;
    let mut iterations = 0;

    'outer: while iterations < settings.max_iterations {
        iterations += 1;
        problem.jacobian(&params, &mut jac);
        let jt = jac.transpose();
        let normal = &jt * &jac;
        let gradient = &jt * DVector::from_column_slice(&r);
        if gradient.amax() == 0.0 {
            converged = true;
            break;
        }
        let diag_floor = normal.diagonal().amax() * 1e-12;

        loop {
            let mut lhs = normal.clone();
            for i in 0..n {
                lhs[(i, i)] += damping * normal[(i, i)].max(diag_floor);
            }
            let Some(chol) = lhs.cholesky() else {
                damping *= 10.0;
                if damping > settings.max_damping {
                    exhausted = true;
                    break 'outer;
                }
                continue;
            };
            let delta = chol.solve(&(-&gradient));
            let mut trial: Vec<f64> = params.iter().zip(delta.iter()).map(|(p, d)| p + d).collect();
            problem.project(&mut trial);
            let step: Vec<f64> = trial.iter().zip(&params).map(|(t, p)| t - p).collect();
            let trial_cost = cost_of(problem, &trial, &mut trial_r);
            let small = problem.step_converged(&params, &step);

            if trial_cost < cost {
                let relative = (cost - trial_cost) / cost;
                params = trial;
                std::mem::swap(&mut r, &mut trial_r);
                cost = trial_cost;
                damping = (damping * 0.1).max(1e-12);
                if small || relative < settings.cost_tolerance {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            if small {
                // the cost no longer decreases and further steps are below tolerance
                converged = true;
                break 'outer;
            }
            damping *= 10.0;
            if damping > settings.max_damping {
                exhausted = true;
                break 'outer;
            }
        }
    }

    LmOutcome {
        params,
        cost,
        initial_cost,
        iterations,
        converged,
        damping_exhausted: exhausted,
    }
}
