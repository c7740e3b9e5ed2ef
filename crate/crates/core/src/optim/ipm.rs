use nalgebra::{DMatrix, DVector};

use super::{kkt, BoxBounds, Multipliers, QcqpProblem, QuadConstraint, QuadraticProgram, SolveReport, SolveStatus, SolverOptions};
use crate::error::Result;

const FRACTION_TO_BOUNDARY: f64 = 0.99;
const WARM_SLACK_FLOOR: f64 = 1e-2;
const WARM_MU: f64 = 1e-3;

/// Inequality rows in a fixed order: general constraints first, then one row
/// per finite lower bound (`lo - z_k <= 0`) and per finite upper bound
/// (`z_k - hi <= 0`). Bound rows stay implicit.
struct Rows<'a> {
    general: &'a [QuadConstraint],
    curved: Vec<bool>,
    lower: Vec<usize>,
    upper: Vec<usize>,
    bounds: &'a BoxBounds,
}

impl<'a> Rows<'a> {
    fn new(general: &'a [QuadConstraint], bounds: &'a BoxBounds) -> Self {
        let n = bounds.len();
        Self {
            general,
            curved: general.iter().map(|c| !c.is_linear()).collect(),
            lower: (0..n).filter(|&k| bounds.lo[k].is_finite()).collect(),
            upper: (0..n).filter(|&k| bounds.hi[k].is_finite()).collect(),
            bounds,
        }
    }

    fn len(&self) -> usize {
        self.general.len() + self.lower.len() + self.upper.len()
    }

    /// Row values and the Jacobian of the general rows.
    fn evaluate(&self, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (mg, n) = (self.general.len(), z.len());
        let mut values = DVector::zeros(self.len());
        let mut jac = DMatrix::zeros(mg, n);
        for (i, con) in self.general.iter().enumerate() {
            values[i] = con.value(z);
            for k in 0..n {
                jac[(i, k)] = con.q[k] + if self.curved[i] { con.p_diag[k] * z[k] } else { 0.0 };
            }
        }
        for (j, &k) in self.lower.iter().enumerate() {
            values[mg + j] = self.bounds.lo[k] - z[k];
        }
        let off = mg + self.lower.len();
        for (j, &k) in self.upper.iter().enumerate() {
            values[off + j] = z[k] - self.bounds.hi[k];
        }
        (values, jac)
    }

    /// `J dz` for the full row set.
    fn apply(&self, jac: &DMatrix<f64>, dz: &DVector<f64>) -> DVector<f64> {
        let mg = self.general.len();
        let mut out = DVector::zeros(self.len());
        out.rows_mut(0, mg).copy_from(&(jac * dz));
        for (j, &k) in self.lower.iter().enumerate() {
            out[mg + j] = -dz[k];
        }
        let off = mg + self.lower.len();
        for (j, &k) in self.upper.iter().enumerate() {
            out[off + j] = dz[k];
        }
        out
    }

    /// `J' w` for the full row set.
    fn apply_transpose(&self, jac: &DMatrix<f64>, w: &DVector<f64>) -> DVector<f64> {
        let mg = self.general.len();
        let mut out = jac.tr_mul(&w.rows(0, mg));
        for (j, &k) in self.lower.iter().enumerate() {
            out[k] -= w[mg + j];
        }
        let off = mg + self.lower.len();
        for (j, &k) in self.upper.iter().enumerate() {
            out[k] += w[off + j];
        }
        out
    }

    fn split(&self, lam: &DVector<f64>, n: usize) -> Multipliers {
        let mg = self.general.len();
        let mut mult = Multipliers::zeros(mg, n);
        mult.general.copy_from(&lam.rows(0, mg));
        for (j, &k) in self.lower.iter().enumerate() {
            mult.lower[k] = lam[mg + j];
        }
        let off = mg + self.lower.len();
        for (j, &k) in self.upper.iter().enumerate() {
            mult.upper[k] = lam[off + j];
        }
        mult
    }
}

/// Cholesky solve with escalating diagonal regularization.
fn regularized_solve(k: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = k.nrows();
    let scale = 1.0 + (0..n).map(|i| k[(i, i)].abs()).fold(0.0, f64::max);
    if let Some(ch) = k.clone().cholesky() {
        return Some(ch);
    }
    let mut delta = 1e-14 * scale;
    while delta < 1e-4 * scale {
        let shifted = k + DMatrix::identity(n, n) * delta;
        if let Some(ch) = shifted.cholesky() {
            return Some(ch);
        }
        delta *= 100.0;
    }
    None
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&x, &d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

fn interior_start(bounds: &BoxBounds, warm: Option<&DVector<f64>>) -> DVector<f64> {
    let n = bounds.len();
    DVector::from_fn(n, |k, _| {
        let (lo, hi) = (bounds.lo[k], bounds.hi[k]);
        let guess = warm.map_or(0.0, |w| w[k]);
        if lo.is_finite() && hi.is_finite() {
            let margin = 1e-3 * (hi - lo);
            guess.clamp(lo + margin, hi - margin)
        } else if lo.is_finite() {
            guess.max(lo + 1e-3 * (1.0 + lo.abs()))
        } else if hi.is_finite() {
            guess.min(hi - 1e-3 * (1.0 + hi.abs()))
        } else {
            guess
        }
    })
}

/// Mehrotra predictor-corrector on a convex QCQP.
///
/// Without a warm start the slacks start at `max(1, -c(z0))` with unit
/// duals. A warm start is trusted more: slacks keep their distance to the
/// boundary down to a small floor and duals start on a low central path.
fn interior_point(
    p: &QcqpProblem,
    warm: Option<&DVector<f64>>,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    let n = p.dim();
    let mg = p.constraints.len();
    let rows = Rows::new(&p.constraints, &p.bounds);
    let m = rows.len();
    let curvature = p.h.diagonal();

    let mut z = interior_start(&p.bounds, warm);
    let report = |z: DVector<f64>, lam: &DVector<f64>, iterations: usize, status: SolveStatus| {
        let multipliers = rows.split(lam, n);
        let kkt_residual = kkt::qcqp_residual(p, &z, &multipliers);
        let status = match status {
            SolveStatus::Optimal if kkt_residual > opts.tol => SolveStatus::MaxIter,
            s => s,
        };
        SolveReport {
            objective: p.objective(&z),
            z_star: z,
            kkt_residual,
            iterations,
            status,
            multipliers,
        }
    };

    if m == 0 {
        let status = match regularized_solve(&p.h) {
            Some(ch) => {
                z = ch.solve(&(-&p.g));
                SolveStatus::Optimal
            }
            None => SolveStatus::InfeasibleNumerics,
        };
        return Ok(report(z, &DVector::zeros(0), 1, status));
    }

    let (values0, _) = rows.evaluate(&z);
    let (mut s, mut lam) = match warm {
        Some(_) => {
            let s = values0.map(|v| (-v).max(WARM_SLACK_FLOOR));
            let lam = s.map(|v| WARM_MU / v);
            (s, lam)
        }
        None => (values0.map(|v| (-v).max(1.0)), DVector::from_element(m, 1.0)),
    };

    for it in 0..opts.max_iter {
        let (values, jac) = rows.evaluate(&z);
        let grad = &p.h * &z + &p.g;
        let mult = rows.split(&lam, n);
        let residual = kkt::residual_from_parts(
            &grad,
            &values.rows(0, mg).into_owned(),
            &jac,
            &p.bounds,
            &z,
            &mult,
            &curvature,
        );
        if residual <= opts.tol {
            return Ok(report(z, &lam, it, SolveStatus::Optimal));
        }
        if !z.iter().chain(lam.iter()).chain(s.iter()).all(|v| v.is_finite()) {
            return Ok(report(z, &lam, it, SolveStatus::InfeasibleNumerics));
        }

        let r_dual = &grad + rows.apply_transpose(&jac, &lam);
        let r_primal = &values + &s;
        let mu = s.dot(&lam) / m as f64;
        let d = lam.component_div(&s);

        let mut kmat = p.h.clone();
        for (i, con) in p.constraints.iter().enumerate() {
            if rows.curved[i] {
                for k in 0..n {
                    kmat[(k, k)] += lam[i] * con.p_diag[k];
                }
            }
        }
        let mut scaled = jac.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= d[i];
        }
        kmat += jac.tr_mul(&scaled);
        for (j, &k) in rows.lower.iter().enumerate() {
            kmat[(k, k)] += d[mg + j];
        }
        let off = mg + rows.lower.len();
        for (j, &k) in rows.upper.iter().enumerate() {
            kmat[(k, k)] += d[off + j];
        }
        let Some(chol) = regularized_solve(&kmat) else {
            return Ok(report(z, &lam, it, SolveStatus::InfeasibleNumerics));
        };

        // rhs3 is the right-hand side of the linearized complementarity row
        let newton = |rhs3: &DVector<f64>| {
            let inner = d.component_mul(&r_primal) + rhs3.component_div(&s);
            let dz = chol.solve(&(-&r_dual - rows.apply_transpose(&jac, &inner)));
            let jdz = rows.apply(&jac, &dz);
            let dlam = d.component_mul(&(&jdz + &r_primal)) + rhs3.component_div(&s);
            let ds = -(&r_primal + jdz);
            (dz, ds, dlam)
        };

        let rhs_aff = -s.component_mul(&lam);
        let (_, ds_aff, dlam_aff) = newton(&rhs_aff);
        let alpha_aff = max_step(&s, &ds_aff).min(max_step(&lam, &dlam_aff)).min(1.0);
        let s_aff = &s + &ds_aff * alpha_aff;
        let lam_aff = &lam + &dlam_aff * alpha_aff;
        let mu_aff = s_aff.dot(&lam_aff) / m as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

        let rhs_cc = &rhs_aff - ds_aff.component_mul(&dlam_aff) + DVector::from_element(m, sigma * mu);
        let (dz, ds, dlam) = newton(&rhs_cc);
        let alpha = (FRACTION_TO_BOUNDARY * max_step(&s, &ds).min(max_step(&lam, &dlam))).min(1.0);
        if !(alpha > 1e-14) {
            return Ok(report(z, &lam, it, SolveStatus::InfeasibleNumerics));
        }
        z += dz * alpha;
        s += ds * alpha;
        lam += dlam * alpha;
    }
    let iterations = opts.max_iter;
    Ok(report(z, &lam, iterations, SolveStatus::Optimal))
}

/// Solve a convex QCQP. The returned status is `optimal` only when the
/// independently recomputed KKT residual is within `opts.tol`.
pub fn solve_qcqp(
    p: &QcqpProblem,
    warm: Option<&DVector<f64>>,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    interior_point(p, warm, opts)
}

/// Solve a convex QP.
pub fn solve_qp(
    p: &QuadraticProgram,
    warm: Option<&DVector<f64>>,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    let constraints: Vec<QuadConstraint> = p
        .a
        .row_iter()
        .zip(p.b.iter())
        .map(|(row, &b)| QuadConstraint::linear(row.transpose(), -b))
        .collect();
    let as_qcqp = QcqpProblem {
        h: p.h.clone(),
        g: p.g.clone(),
        offset: p.offset,
        constraints,
        bounds: p.bounds.clone(),
    };
    let mut rep = interior_point(&as_qcqp, warm, opts)?;
    rep.kkt_residual = kkt::qp_residual(p, &rep.z_star, &rep.multipliers);
    if rep.status == SolveStatus::Optimal && rep.kkt_residual > opts.tol {
        rep.status = SolveStatus::MaxIter;
    }
    Ok(rep)
}
