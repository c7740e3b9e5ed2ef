//! First-order optimality residuals computed directly from problem data.
//!
//! The residual is the largest of
//!
//! * stationarity `grad f + J'lam - mu_lo + mu_hi`, each component divided
//!   by one plus the larger of the objective gradient and the objective
//!   curvature along that coordinate (so heavily penalized slacks are
//!   measured in their own units),
//! * primal infeasibility of general rows and bounds,
//! * complementarity `min(|lam_i|, |c_i(z)|)` and its bound analogues, so
//!   every row is either tight or carries a negligible multiplier whatever
//!   the scale of the objective,
//! * negative parts of any multiplier.

use nalgebra::{DMatrix, DVector};

use super::{BoxBounds, Multipliers, QcqpProblem, QuadraticProgram};

/// Residual of a generic smooth problem given its evaluated pieces.
#[allow(clippy::too_many_arguments)]
pub fn residual_from_parts(
    gradient: &DVector<f64>,
    constraint_values: &DVector<f64>,
    jacobian: &DMatrix<f64>,
    bounds: &BoxBounds,
    z: &DVector<f64>,
    mult: &Multipliers,
    curvature: &DVector<f64>,
) -> f64 {
    let jt_lam = jacobian.tr_mul(&mult.general);
    let stationarity = gradient + &jt_lam - &mult.lower + &mult.upper;
    let stat = (0..z.len())
        .map(|k| {
            let scale = 1.0 + gradient[k].abs().max(curvature[k].abs());
            stationarity[k].abs() / scale
        })
        .fold(0.0, f64::max);

    let mut primal = 0.0f64;
    let mut comp = 0.0f64;
    let mut sign = 0.0f64;
    for (i, &c) in constraint_values.iter().enumerate() {
        let lam = mult.general[i];
        primal = primal.max(c.max(0.0));
        comp = comp.max(lam.abs().min(c.abs()));
        sign = sign.max(-lam);
    }
    for k in 0..z.len() {
        let (lo, hi) = (bounds.lo[k], bounds.hi[k]);
        primal = primal.max(lo - z[k]).max(z[k] - hi);
        if lo.is_finite() {
            comp = comp.max(mult.lower[k].abs().min((z[k] - lo).abs()));
        } else {
            sign = sign.max(mult.lower[k].abs());
        }
        if hi.is_finite() {
            comp = comp.max(mult.upper[k].abs().min((hi - z[k]).abs()));
        } else {
            sign = sign.max(mult.upper[k].abs());
        }
        sign = sign.max(-mult.lower[k]).max(-mult.upper[k]);
    }
    stat.max(primal).max(comp).max(sign)
}

/// KKT residual of a QP at `(z, mult)`.
pub fn qp_residual(p: &QuadraticProgram, z: &DVector<f64>, mult: &Multipliers) -> f64 {
    let grad = &p.h * z + &p.g;
    let values = &p.a * z - &p.b;
    residual_from_parts(&grad, &values, &p.a, &p.bounds, z, mult, &p.h.diagonal())
}

/// KKT residual of a QCQP at `(z, mult)`.
pub fn qcqp_residual(p: &QcqpProblem, z: &DVector<f64>, mult: &Multipliers) -> f64 {
    let n = p.dim();
    let m = p.constraints.len();
    let grad = &p.h * z + &p.g;
    let values = DVector::from_iterator(m, p.constraints.iter().map(|c| c.value(z)));
    let mut jac = DMatrix::zeros(m, n);
    for (i, c) in p.constraints.iter().enumerate() {
        jac.set_row(i, &c.gradient(z).transpose());
    }
    residual_from_parts(&grad, &values, &jac, &p.bounds, z, mult, &p.h.diagonal())
}
