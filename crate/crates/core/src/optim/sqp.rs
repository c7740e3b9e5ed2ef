use nalgebra::{DMatrix, DVector};

use super::{kkt, solve_qp, BoxBounds, QuadraticProgram, SolveReport, SolveStatus, SolverOptions};
use crate::error::{GovernError, Result};

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-10;

/// Smooth inequality-constrained problem `min f(z)` s.t. `c(z) <= 0` and box
/// bounds.
pub trait NlpProblem {
    fn dim(&self) -> usize;
    fn bounds(&self) -> &BoxBounds;
    fn objective(&self, z: &DVector<f64>) -> f64;
    fn gradient(&self, z: &DVector<f64>) -> DVector<f64>;
    fn constraints(&self, z: &DVector<f64>) -> Result<DVector<f64>>;
    /// Constraint values together with their `m x n` Jacobian.
    fn constraints_with_jacobian(&self, z: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>;

    /// Initial Lagrangian Hessian model. Problems with a known quadratic
    /// objective should return its exact Hessian.
    fn hessian_seed(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim())
    }
}

struct Point {
    z: DVector<f64>,
    f: f64,
    grad: DVector<f64>,
    c: DVector<f64>,
    jac: DMatrix<f64>,
}

impl Point {
    fn eval(p: &dyn NlpProblem, z: DVector<f64>) -> Result<Self> {
        let (c, jac) = p.constraints_with_jacobian(&z)?;
        Ok(Self {
            f: p.objective(&z),
            grad: p.gradient(&z),
            c,
            jac,
            z,
        })
    }

    fn violation(&self) -> f64 {
        self.c.iter().map(|c| c.max(0.0)).sum()
    }
}

fn merit(p: &dyn NlpProblem, z: &DVector<f64>, penalty: f64) -> f64 {
    match p.constraints(z) {
        Ok(c) => p.objective(z) + penalty * c.iter().map(|c| c.max(0.0)).sum::<f64>(),
        Err(_) => f64::INFINITY,
    }
}

fn subproblem(
    point: &Point,
    hess: &DMatrix<f64>,
    bounds: &BoxBounds,
    rhs_shift: Option<&DVector<f64>>,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    let n = point.z.len();
    let lo = (0..n).map(|k| bounds.lo[k] - point.z[k]).collect();
    let hi = (0..n).map(|k| bounds.hi[k] - point.z[k]).collect();
    let b = match rhs_shift {
        Some(c) => -c,
        None => -&point.c,
    };
    let qp = QuadraticProgram::new(
        hess.clone(),
        point.grad.clone(),
        point.jac.clone(),
        b,
        BoxBounds { lo, hi },
    )?;
    solve_qp(&qp, None, opts)
}

fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Sequential quadratic programming from `warm` (clamped into the bounds).
///
/// Each major iteration solves the QP built from the linearized constraints
/// and the current damped-BFGS Hessian model, then backtracks on the l1
/// merit function, trying one second-order correction before shortening a
/// rejected full step. Evaluation failures at the start point are errors;
/// at trial points they only reject the trial.
pub fn solve_nlp(
    problem: &dyn NlpProblem,
    warm: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    let n = problem.dim();
    if warm.len() != n {
        return Err(GovernError::contract(format!(
            "warm start has length {}, problem has {n} variables",
            warm.len()
        )));
    }
    let bounds = problem.bounds();
    let mut hess = symmetric_part(&problem.hessian_seed());
    let curvature = hess.diagonal();
    let qp_opts = SolverOptions {
        tol: (opts.tol * 1e-3).clamp(1e-12, 1e-9),
        max_iter: 200,
    };

    let mut point = Point::eval(problem, bounds.clamp(warm))?;
    let mut penalty = 0.0f64;

    let finish = |point: Point, sub: Option<&SolveReport>, iterations: usize, status: SolveStatus| {
        let multipliers = sub
            .map(|s| s.multipliers.clone())
            .unwrap_or_else(|| super::Multipliers::zeros(point.c.len(), n));
        let kkt_residual = kkt::residual_from_parts(
            &point.grad,
            &point.c,
            &point.jac,
            bounds,
            &point.z,
            &multipliers,
            &curvature,
        );
        let status = match status {
            SolveStatus::Optimal if kkt_residual > opts.tol => SolveStatus::MaxIter,
            s => s,
        };
        SolveReport {
            z_star: point.z,
            objective: point.f,
            kkt_residual,
            iterations,
            status,
            multipliers,
        }
    };

    for it in 0..opts.max_iter {
        let sub = subproblem(&point, &hess, bounds, None, &qp_opts)?;
        if sub.status == SolveStatus::InfeasibleNumerics || !sub.z_star.iter().all(|v| v.is_finite()) {
            return Ok(finish(point, None, it, SolveStatus::InfeasibleNumerics));
        }
        let residual = kkt::residual_from_parts(
            &point.grad,
            &point.c,
            &point.jac,
            bounds,
            &point.z,
            &sub.multipliers,
            &curvature,
        );
        // With large penalties a tiny infeasibility buys a visible objective
        // decrease, so also bound what the violation is worth.
        let violation_value: f64 = sub
            .multipliers
            .general
            .iter()
            .zip(point.c.iter())
            .map(|(l, c)| l.abs() * c.max(0.0))
            .sum();
        if residual <= opts.tol && violation_value <= opts.tol {
            return Ok(finish(point, Some(&sub), it, SolveStatus::Optimal));
        }

        let d = sub.z_star.clone();
        let lam = &sub.multipliers.general;
        penalty = penalty.max(1.5 * lam.amax() + 1e-8);

        let phi0 = point.f + penalty * point.violation();
        let slope = point.grad.dot(&d) - penalty * point.violation();
        let accept = |trial: f64, alpha: f64| trial <= phi0 + ARMIJO * alpha * slope.min(0.0);

        let mut next_z = None;
        let full = &point.z + &d;
        if accept(merit(problem, &full, penalty), 1.0) {
            next_z = Some(full);
        } else if let Ok(c_full) = problem.constraints(&full) {
            // second-order correction: re-aim the linearization at c(z + d)
            let shifted = c_full - &point.jac * &d;
            if let Ok(soc) = subproblem(&point, &hess, bounds, Some(&shifted), &qp_opts) {
                if soc.status != SolveStatus::InfeasibleNumerics {
                    let corrected = &point.z + &soc.z_star;
                    if accept(merit(problem, &corrected, penalty), 1.0) {
                        next_z = Some(corrected);
                    }
                }
            }
        }
        if next_z.is_none() {
            let mut alpha = 0.5;
            while alpha >= MIN_STEP {
                let trial = &point.z + &d * alpha;
                if accept(merit(problem, &trial, penalty), alpha) {
                    next_z = Some(trial);
                    break;
                }
                alpha *= 0.5;
            }
        }
        let Some(next_z) = next_z else {
            log::debug!("sqp line search failed at iteration {it} (residual {residual:e})");
            return Ok(finish(point, Some(&sub), it, SolveStatus::MaxIter));
        };
        let next_z = bounds.clamp(&next_z);
        let next = Point::eval(problem, next_z)?;

        let step = &next.z - &point.z;
        let grad_lag_new = &next.grad + next.jac.tr_mul(lam);
        let grad_lag_old = &point.grad + point.jac.tr_mul(lam);
        damped_bfgs_update(&mut hess, &step, &(grad_lag_new - grad_lag_old));
        point = next;
    }
    let sub = subproblem(&point, &hess, bounds, None, &qp_opts)?;
    Ok(finish(point, Some(&sub), opts.max_iter, SolveStatus::Optimal))
}

/// Powell-damped BFGS update keeping `hess` positive definite.
fn damped_bfgs_update(hess: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*hess * s;
    let sbs = s.dot(&bs);
    if !(sbs > 1e-300) || s.amax() == 0.0 {
        return;
    }
    let sy = s.dot(y);
    let y = if sy >= 0.2 * sbs {
        y.clone()
    } else {
        let theta = 0.8 * sbs / (sbs - sy);
        y * theta + &bs * (1.0 - theta)
    };
    let sy = s.dot(&y);
    if !(sy > 0.0) {
        return;
    }
    *hess += &y * y.transpose() / sy - &bs * bs.transpose() / sbs;
    *hess = symmetric_part(hess);
}
