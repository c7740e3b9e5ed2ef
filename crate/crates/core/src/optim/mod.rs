//! Dense solvers for the small problems a governor poses each step.
//!
//! * [`solve_qp`] / [`solve_qcqp`]: primal-dual interior point with
//!   Mehrotra predictor-corrector steps. Linear rows are quadratic
//!   constraints with a zero curvature term, so both share one engine.
//! * [`solve_nlp`]: SQP with a damped-BFGS Lagrangian Hessian and an
//!   l1 merit line search; subproblems go through [`solve_qp`].
//!
//! Residuals are relative (each block is divided by one plus the magnitude
//! of the terms it balances) so that large slack penalties do not distort
//! the convergence test.

mod ipm;
pub mod kkt;
mod sqp;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GovernError, Result};

pub use ipm::{solve_qcqp, solve_qp};
pub use sqp::{solve_nlp, NlpProblem};

/// Default interior-point tolerance.
pub const QP_TOL: f64 = 1e-8;
/// Default SQP tolerance.
pub const NLP_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 100;

/// Per-variable bounds; infinite entries mean unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxBounds {
    pub fn unbounded(n: usize) -> Self {
        Self {
            lo: vec![f64::NEG_INFINITY; n],
            hi: vec![f64::INFINITY; n],
        }
    }

    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(l, h)| l > h || l.is_nan() || h.is_nan()) {
            return Err(GovernError::contract("box bounds need lo <= hi entrywise"));
        }
        Ok(Self { lo, hi })
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    pub fn clamp(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            z.len(),
            z.iter()
                .enumerate()
                .map(|(k, &v)| v.clamp(self.lo[k], self.hi[k])),
        )
    }
}

/// `min 1/2 z'Hz + g'z + offset` s.t. `A z <= b` and box bounds.
#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub offset: f64,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub bounds: BoxBounds,
}

impl QuadraticProgram {
    pub fn new(
        h: DMatrix<f64>,
        g: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
        bounds: BoxBounds,
    ) -> Result<Self> {
        let n = g.len();
        if h.nrows() != n || h.ncols() != n || a.ncols() != n || a.nrows() != b.len() || bounds.len() != n {
            return Err(GovernError::contract("quadratic program dimensions inconsistent"));
        }
        check_symmetric(&h)?;
        Ok(Self {
            h,
            g,
            offset: 0.0,
            a,
            b,
            bounds,
        })
    }

    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z) + self.offset
    }
}

/// `1/2 z' diag(p) z + q'z + c <= 0` with `p >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadConstraint {
    pub p_diag: DVector<f64>,
    pub q: DVector<f64>,
    pub c: f64,
}

impl QuadConstraint {
    pub fn linear(q: DVector<f64>, c: f64) -> Self {
        Self {
            p_diag: DVector::zeros(q.len()),
            q,
            c,
        }
    }

    pub fn value(&self, z: &DVector<f64>) -> f64 {
        let quad: f64 = self
            .p_diag
            .iter()
            .zip(z.iter())
            .map(|(p, v)| p * v * v)
            .sum();
        0.5 * quad + self.q.dot(z) + self.c
    }

    pub fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        self.p_diag.component_mul(z) + &self.q
    }

    pub fn is_linear(&self) -> bool {
        self.p_diag.iter().all(|&p| p == 0.0)
    }
}

/// Convex QCQP: quadratic objective, diagonal convex quadratic constraints,
/// box bounds.
#[derive(Debug, Clone)]
pub struct QcqpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub offset: f64,
    pub constraints: Vec<QuadConstraint>,
    pub bounds: BoxBounds,
}

impl QcqpProblem {
    pub fn new(
        h: DMatrix<f64>,
        g: DVector<f64>,
        offset: f64,
        constraints: Vec<QuadConstraint>,
        bounds: BoxBounds,
    ) -> Result<Self> {
        let n = g.len();
        if h.nrows() != n || h.ncols() != n || bounds.len() != n {
            return Err(GovernError::contract("QCQP objective dimensions inconsistent"));
        }
        check_symmetric(&h)?;
        for (i, con) in constraints.iter().enumerate() {
            if con.q.len() != n || con.p_diag.len() != n {
                return Err(GovernError::contract(format!(
                    "QCQP constraint {i} has wrong dimension"
                )));
            }
            if con.p_diag.iter().any(|&p| !(p >= 0.0)) {
                return Err(GovernError::contract(format!(
                    "QCQP constraint {i} is not convex"
                )));
            }
        }
        Ok(Self {
            h,
            g,
            offset,
            constraints,
            bounds,
        })
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z) + self.offset
    }

    /// The QP obtained when every curvature term is dropped.
    pub fn linear_part(&self) -> Result<QuadraticProgram> {
        let n = self.dim();
        let m = self.constraints.len();
        let a = DMatrix::from_fn(m, n, |i, k| self.constraints[i].q[k]);
        let b = DVector::from_iterator(m, self.constraints.iter().map(|c| -c.c));
        Ok(QuadraticProgram::new(self.h.clone(), self.g.clone(), a, b, self.bounds.clone())?
            .with_offset(self.offset))
    }
}

fn check_symmetric(h: &DMatrix<f64>) -> Result<()> {
    let scale = 1.0 + h.amax();
    if (h - h.transpose()).amax() > 1e-12 * scale {
        return Err(GovernError::contract("objective Hessian is not symmetric"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    InfeasibleNumerics,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::InfeasibleNumerics => "infeasible_numerics",
        })
    }
}

/// Lagrange multipliers: one per general constraint, and per variable for
/// the lower and upper bounds (zero where the bound is infinite).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Multipliers {
    pub general: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Multipliers {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            general: DVector::zeros(m),
            lower: DVector::zeros(n),
            upper: DVector::zeros(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub z_star: DVector<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub multipliers: Multipliers,
}

impl SolveReport {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl SolverOptions {
    pub fn qp() -> Self {
        Self {
            tol: QP_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }

    pub fn nlp() -> Self {
        Self {
            tol: NLP_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}
