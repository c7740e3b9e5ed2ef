//! Discrete-time closed-loop plants driven by a scalar reference command.
//!
//! A plant advances `x(t+1) = f(x(t), v(t))` and exposes the constrained
//! outputs `y(t) = h(x(t), v(t))`, admissible iff every entry is `<= 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GovernError, Result};

pub type StateVector = DVector<f64>;
pub type OutputVector = DVector<f64>;

/// Default cap on forward-simulation steps used to locate an equilibrium.
pub const EQUILIBRIUM_MAX_STEPS: usize = 1_000_000;

/// Compact admissible command set `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputInterval {
    pub lo: f64,
    pub hi: f64,
}

impl InputInterval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(GovernError::contract(format!(
                "input interval requires finite lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn saturate(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Clamp `v` into `interval`.
pub fn saturate(interval: &InputInterval, v: f64) -> f64 {
    interval.saturate(v)
}

/// The closed-loop nonlinear system seen by a governor.
///
/// Implementations must be deterministic, and the Jacobians must agree with
/// finite differences of `f` and `h`.
pub trait PlantModel: Send + Sync {
    fn n_x(&self) -> usize;
    fn n_y(&self) -> usize;
    fn input_interval(&self) -> InputInterval;

    /// Per-state bounds of the declared operating box, used for sampling.
    fn operating_box(&self) -> Vec<(f64, f64)>;

    fn f(&self, x: &StateVector, v: f64) -> StateVector;
    fn h(&self, x: &StateVector, v: f64) -> OutputVector;
    fn jac_f_x(&self, x: &StateVector, v: f64) -> DMatrix<f64>;
    fn jac_f_v(&self, x: &StateVector, v: f64) -> DVector<f64>;
    fn jac_h_x(&self, x: &StateVector, v: f64) -> DMatrix<f64>;
    fn jac_h_v(&self, x: &StateVector, v: f64) -> DVector<f64>;
}

fn check_finite(what: &str, z: &DVector<f64>, x: &StateVector, v: f64) -> Result<()> {
    if z.iter().all(|e| e.is_finite()) {
        Ok(())
    } else {
        Err(GovernError::PlantDomain(format!(
            "non-finite {what} from x = {:?}, v = {v}",
            x.as_slice()
        )))
    }
}

/// One step of the closed-loop dynamics with a finiteness check.
pub fn step(plant: &dyn PlantModel, x: &StateVector, v: f64) -> Result<StateVector> {
    let next = plant.f(x, v);
    check_finite("state", &next, x, v)?;
    Ok(next)
}

/// Constrained outputs with a finiteness check.
pub fn output(plant: &dyn PlantModel, x: &StateVector, v: f64) -> Result<OutputVector> {
    let y = plant.h(x, v);
    check_finite("output", &y, x, v)?;
    Ok(y)
}

/// Steady state reached under a constant command, found by iterating the
/// dynamics from the zero state until the fixed-point residual drops to `tol`.
pub fn equilibrium(plant: &dyn PlantModel, v: f64, tol: f64) -> Result<StateVector> {
    equilibrium_with_cap(plant, v, tol, EQUILIBRIUM_MAX_STEPS)
}

pub fn equilibrium_with_cap(
    plant: &dyn PlantModel,
    v: f64,
    tol: f64,
    max_steps: usize,
) -> Result<StateVector> {
    let mut x = StateVector::zeros(plant.n_x());
    let mut residual = f64::INFINITY;
    for _ in 0..max_steps {
        let next = step(plant, &x, v)?;
        residual = (&next - &x).amax();
        if residual <= tol {
            // the fixed point check is on x itself, not on its successor
            return Ok(x);
        }
        x = next;
    }
    Err(GovernError::NonConvergence {
        steps: max_steps,
        residual,
    })
}

/// `x(t+1) = A x + B v`, `y = C x + D v`.
#[derive(Debug, Clone)]
pub struct LinearPlant {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: DMatrix<f64>,
    d: DVector<f64>,
    interval: InputInterval,
    operating_box: Vec<(f64, f64)>,
}

impl LinearPlant {
    pub fn new(
        a: DMatrix<f64>,
        b: DVector<f64>,
        c: DMatrix<f64>,
        d: DVector<f64>,
        interval: InputInterval,
    ) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n || b.len() != n || c.ncols() != n || d.len() != c.nrows() {
            return Err(GovernError::contract(format!(
                "linear plant dimensions inconsistent: A {}x{}, B {}, C {}x{}, D {}",
                a.nrows(),
                a.ncols(),
                b.len(),
                c.nrows(),
                c.ncols(),
                d.len()
            )));
        }
        if c.nrows() == 0 {
            return Err(GovernError::contract("linear plant needs at least one output"));
        }
        let radius = a
            .complex_eigenvalues()
            .iter()
            .map(|l| l.norm())
            .fold(0.0, f64::max);
        if radius >= 1.0 {
            return Err(GovernError::contract(format!(
                "linear plant must be stable, spectral radius is {radius}"
            )));
        }
        let operating_box = vec![(-10.0, 10.0); n];
        Ok(Self {
            a,
            b,
            c,
            d,
            interval,
            operating_box,
        })
    }

    pub fn with_operating_box(mut self, operating_box: Vec<(f64, f64)>) -> Result<Self> {
        if operating_box.len() != self.a.nrows() {
            return Err(GovernError::contract("operating box length must equal n_x"));
        }
        self.operating_box = operating_box;
        Ok(self)
    }

    /// Scalar plant with `C = [1]`, `D = [0]`.
    pub fn scalar(a: f64, b: f64, interval: InputInterval) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, a),
            DVector::from_element(1, b),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            interval,
        )
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }
}

impl PlantModel for LinearPlant {
    fn n_x(&self) -> usize {
        self.a.nrows()
    }
    fn n_y(&self) -> usize {
        self.c.nrows()
    }
    fn input_interval(&self) -> InputInterval {
        self.interval
    }
    fn operating_box(&self) -> Vec<(f64, f64)> {
        self.operating_box.clone()
    }
    fn f(&self, x: &StateVector, v: f64) -> StateVector {
        &self.a * x + &self.b * v
    }
    fn h(&self, x: &StateVector, v: f64) -> OutputVector {
        &self.c * x + &self.d * v
    }
    fn jac_f_x(&self, _x: &StateVector, _v: f64) -> DMatrix<f64> {
        self.a.clone()
    }
    fn jac_f_v(&self, _x: &StateVector, _v: f64) -> DVector<f64> {
        self.b.clone()
    }
    fn jac_h_x(&self, _x: &StateVector, _v: f64) -> DMatrix<f64> {
        self.c.clone()
    }
    fn jac_h_v(&self, _x: &StateVector, _v: f64) -> DVector<f64> {
        self.d.clone()
    }
}

/// Damped pendulum under a torque proportional to the command, discretized
/// with forward Euler. State is `[angle, rate]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumDynamics {
    #[serde(rename = "Ts")]
    pub ts: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for PendulumDynamics {
    fn default() -> Self {
        Self {
            ts: 0.05,
            a: 4.0,
            b: 1.5,
            c: 1.0,
        }
    }
}

impl PendulumDynamics {
    fn f(&self, x: &StateVector, v: f64) -> StateVector {
        let (x1, x2) = (x[0], x[1]);
        StateVector::from_vec(vec![
            x1 + self.ts * x2,
            x2 + self.ts * (-self.a * x1.sin() - self.b * x2 + self.c * v),
        ])
    }

    fn jac_x(&self, x: &StateVector) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            2,
            2,
            &[
                1.0,
                self.ts,
                -self.ts * self.a * x[0].cos(),
                1.0 - self.ts * self.b,
            ],
        )
    }

    fn jac_v(&self) -> DVector<f64> {
        DVector::from_vec(vec![0.0, self.ts * self.c])
    }

    /// Angle at rest under constant `v`, valid while `|c v / a| < 1`.
    pub fn analytic_equilibrium(&self, v: f64) -> Option<StateVector> {
        let s = self.c * v / self.a;
        (s.abs() < 1.0).then(|| StateVector::from_vec(vec![s.asin(), 0.0]))
    }
}

const PENDULUM_BOX: [(f64, f64); 2] = [(-1.0, 1.0), (-2.0, 2.0)];

/// Pendulum with a single angle ceiling `y = x1 - x1_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumPlant {
    pub dynamics: PendulumDynamics,
    pub x1_max: f64,
    pub interval: InputInterval,
}

impl Default for PendulumPlant {
    fn default() -> Self {
        Self {
            dynamics: PendulumDynamics::default(),
            x1_max: 0.6,
            interval: InputInterval { lo: -3.0, hi: 3.0 },
        }
    }
}

impl PendulumPlant {
    /// Largest constant command whose equilibrium keeps the angle admissible.
    pub fn admissible_boundary(&self) -> f64 {
        self.dynamics.a * self.x1_max.sin() / self.dynamics.c
    }
}

impl PlantModel for PendulumPlant {
    fn n_x(&self) -> usize {
        2
    }
    fn n_y(&self) -> usize {
        1
    }
    fn input_interval(&self) -> InputInterval {
        self.interval
    }
    fn operating_box(&self) -> Vec<(f64, f64)> {
        PENDULUM_BOX.to_vec()
    }
    fn f(&self, x: &StateVector, v: f64) -> StateVector {
        self.dynamics.f(x, v)
    }
    fn h(&self, x: &StateVector, _v: f64) -> OutputVector {
        OutputVector::from_element(1, x[0] - self.x1_max)
    }
    fn jac_f_x(&self, x: &StateVector, _v: f64) -> DMatrix<f64> {
        self.dynamics.jac_x(x)
    }
    fn jac_f_v(&self, _x: &StateVector, _v: f64) -> DVector<f64> {
        self.dynamics.jac_v()
    }
    fn jac_h_x(&self, _x: &StateVector, _v: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0])
    }
    fn jac_h_v(&self, _x: &StateVector, _v: f64) -> DVector<f64> {
        DVector::zeros(1)
    }
}

/// Pendulum with an angle ceiling and a floor on the angular rate:
/// `y1 = x1 - x1_max`, `y2 = -x2 - x2_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualOutputPendulum {
    pub dynamics: PendulumDynamics,
    pub x1_max: f64,
    pub x2_max: f64,
    pub interval: InputInterval,
}

impl Default for DualOutputPendulum {
    fn default() -> Self {
        Self {
            dynamics: PendulumDynamics::default(),
            x1_max: 0.6,
            x2_max: 1.0,
            interval: InputInterval { lo: -3.0, hi: 3.0 },
        }
    }
}

impl PlantModel for DualOutputPendulum {
    fn n_x(&self) -> usize {
        2
    }
    fn n_y(&self) -> usize {
        2
    }
    fn input_interval(&self) -> InputInterval {
        self.interval
    }
    fn operating_box(&self) -> Vec<(f64, f64)> {
        PENDULUM_BOX.to_vec()
    }
    fn f(&self, x: &StateVector, v: f64) -> StateVector {
        self.dynamics.f(x, v)
    }
    fn h(&self, x: &StateVector, _v: f64) -> OutputVector {
        OutputVector::from_vec(vec![x[0] - self.x1_max, -x[1] - self.x2_max])
    }
    fn jac_f_x(&self, x: &StateVector, _v: f64) -> DMatrix<f64> {
        self.dynamics.jac_x(x)
    }
    fn jac_f_v(&self, _x: &StateVector, _v: f64) -> DVector<f64> {
        self.dynamics.jac_v()
    }
    fn jac_h_x(&self, _x: &StateVector, _v: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])
    }
    fn jac_h_v(&self, _x: &StateVector, _v: f64) -> DVector<f64> {
        DVector::zeros(2)
    }
}

/// Re-expresses a plant's outputs as fixed affine combinations
/// `y' = L y + offset`, e.g. to merge a ratio constraint of two physical
/// outputs into one constrained residual.
pub struct CombinedOutputs<P> {
    inner: P,
    mix: DMatrix<f64>,
    offset: DVector<f64>,
}

impl<P: PlantModel> CombinedOutputs<P> {
    pub fn new(inner: P, mix: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        if mix.ncols() != inner.n_y() || mix.nrows() != offset.len() || mix.nrows() == 0 {
            return Err(GovernError::contract(
                "output mix must be n_out x n_y with a matching offset",
            ));
        }
        Ok(Self { inner, mix, offset })
    }

    /// Curvature bound carried by each combined output, given per-output
    /// bounds of the inner plant: `sum_k |L_ik| M_k`.
    pub fn induced_curvature(&self, inner_mbar: &[f64]) -> Vec<f64> {
        self.mix
            .row_iter()
            .map(|row| {
                row.iter()
                    .zip(inner_mbar)
                    .map(|(l, m)| l.abs() * m)
                    .sum()
            })
            .collect()
    }
}

impl<P: PlantModel> PlantModel for CombinedOutputs<P> {
    fn n_x(&self) -> usize {
        self.inner.n_x()
    }
    fn n_y(&self) -> usize {
        self.mix.nrows()
    }
    fn input_interval(&self) -> InputInterval {
        self.inner.input_interval()
    }
    fn operating_box(&self) -> Vec<(f64, f64)> {
        self.inner.operating_box()
    }
    fn f(&self, x: &StateVector, v: f64) -> StateVector {
        self.inner.f(x, v)
    }
    fn h(&self, x: &StateVector, v: f64) -> OutputVector {
        &self.mix * self.inner.h(x, v) + &self.offset
    }
    fn jac_f_x(&self, x: &StateVector, v: f64) -> DMatrix<f64> {
        self.inner.jac_f_x(x, v)
    }
    fn jac_f_v(&self, x: &StateVector, v: f64) -> DVector<f64> {
        self.inner.jac_f_v(x, v)
    }
    fn jac_h_x(&self, x: &StateVector, v: f64) -> DMatrix<f64> {
        &self.mix * self.inner.jac_h_x(x, v)
    }
    fn jac_h_v(&self, x: &StateVector, v: f64) -> DVector<f64> {
        &self.mix * self.inner.jac_h_v(x, v)
    }
}

fn default_interval() -> [f64; 2] {
    [-3.0, 3.0]
}
fn default_x1_max() -> f64 {
    0.6
}
fn default_x2_max() -> f64 {
    1.0
}

/// Serializable plant selection, as found under `"plant"` in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", from = "RawPlantSpec")]
pub enum PlantSpec {
    Linear {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        #[serde(rename = "B")]
        b: Vec<f64>,
        #[serde(rename = "C")]
        c: Vec<Vec<f64>>,
        #[serde(rename = "D")]
        d: Vec<f64>,
        #[serde(default = "default_interval")]
        input_interval: [f64; 2],
    },
    Pendulum {
        #[serde(flatten)]
        dynamics: PendulumDynamics,
        #[serde(default = "default_x1_max")]
        x1_max: f64,
        #[serde(default = "default_interval")]
        input_interval: [f64; 2],
    },
    DualPendulum {
        #[serde(flatten)]
        dynamics: PendulumDynamics,
        #[serde(default = "default_x1_max")]
        x1_max: f64,
        #[serde(default = "default_x2_max")]
        x2_max: f64,
        #[serde(default = "default_interval")]
        input_interval: [f64; 2],
    },
}

fn default_ts() -> f64 {
    PendulumDynamics::default().ts
}
fn default_a() -> f64 {
    PendulumDynamics::default().a
}
fn default_b() -> f64 {
    PendulumDynamics::default().b
}
fn default_c() -> f64 {
    PendulumDynamics::default().c
}

// Flattened fields cannot reject unknown keys, so parsing goes through this
// spelled-out mirror.
#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawPlantSpec {
    Linear {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        #[serde(rename = "B")]
        b: Vec<f64>,
        #[serde(rename = "C")]
        c: Vec<Vec<f64>>,
        #[serde(rename = "D")]
        d: Vec<f64>,
        #[serde(default = "default_interval")]
        input_interval: [f64; 2],
    },
    Pendulum {
        #[serde(rename = "Ts", default = "default_ts")]
        ts: f64,
        #[serde(default = "default_a")]
        a: f64,
        #[serde(default = "default_b")]
        b: f64,
        #[serde(default = "default_c")]
        c: f64,
        #[serde(default = "default_x1_max")]
        x1_max: f64,
        #[serde(default = "default_interval")]
        input_interval: [f64; 2],
    },
    DualPendulum {
        #[serde(rename = "Ts", default = "default_ts")]
        ts: f64,
        #[serde(default = "default_a")]
        a: f64,
        #[serde(default = "default_b")]
        b: f64,
        #[serde(default = "default_c")]
        c: f64,
        #[serde(default = "default_x1_max")]
        x1_max: f64,
        #[serde(default = "default_x2_max")]
        x2_max: f64,
        #[serde(default = "default_interval")]
        input_interval: [f64; 2],
    },
}

impl From<RawPlantSpec> for PlantSpec {
    fn from(raw: RawPlantSpec) -> Self {
        match raw {
            RawPlantSpec::Linear {
                a,
                b,
                c,
                d,
                input_interval,
            } => PlantSpec::Linear {
                a,
                b,
                c,
                d,
                input_interval,
            },
            RawPlantSpec::Pendulum {
                ts,
                a,
                b,
                c,
                x1_max,
                input_interval,
            } => PlantSpec::Pendulum {
                dynamics: PendulumDynamics { ts, a, b, c },
                x1_max,
                input_interval,
            },
            RawPlantSpec::DualPendulum {
                ts,
                a,
                b,
                c,
                x1_max,
                x2_max,
                input_interval,
            } => PlantSpec::DualPendulum {
                dynamics: PendulumDynamics { ts, a, b, c },
                x1_max,
                x2_max,
                input_interval,
            },
        }
    }
}

impl Default for PlantSpec {
    fn default() -> Self {
        PlantSpec::Pendulum {
            dynamics: PendulumDynamics::default(),
            x1_max: 0.6,
            input_interval: default_interval(),
        }
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(GovernError::contract(format!("matrix {what} must be rectangular and nonempty")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl PlantSpec {
    pub fn build(&self) -> Result<Box<dyn PlantModel>> {
        Ok(match self {
            PlantSpec::Linear {
                a,
                b,
                c,
                d,
                input_interval,
            } => Box::new(LinearPlant::new(
                matrix_from_rows(a, "A")?,
                DVector::from_vec(b.clone()),
                matrix_from_rows(c, "C")?,
                DVector::from_vec(d.clone()),
                InputInterval::new(input_interval[0], input_interval[1])?,
            )?),
            PlantSpec::Pendulum {
                dynamics,
                x1_max,
                input_interval,
            } => Box::new(PendulumPlant {
                dynamics: *dynamics,
                x1_max: *x1_max,
                interval: InputInterval::new(input_interval[0], input_interval[1])?,
            }),
            PlantSpec::DualPendulum {
                dynamics,
                x1_max,
                x2_max,
                input_interval,
            } => Box::new(DualOutputPendulum {
                dynamics: *dynamics,
                x1_max: *x1_max,
                x2_max: *x2_max,
                interval: InputInterval::new(input_interval[0], input_interval[1])?,
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_linear() -> LinearPlant {
        LinearPlant::scalar(0.5, 1.0, InputInterval::new(-3.0, 3.0).unwrap()).unwrap()
    }

    #[test]
    fn linear_step_and_equilibrium() {
        let p = scalar_linear();
        let x = step(&p, &StateVector::from_element(1, 2.0), 1.0).unwrap();
        assert_eq!(x[0], 2.0);
        let eq = equilibrium(&p, 2.0, 1e-10).unwrap();
        assert_close!(eq[0], 4.0, 1e-9);
    }

    #[test]
    fn pendulum_step_examples() {
        let p = PendulumPlant::default();
        let z = StateVector::zeros(2);
        assert_eq!(step(&p, &z, 0.0).unwrap(), z);
        let x = step(&p, &z, 2.0).unwrap();
        assert_eq!(x[0], 0.0);
        assert_close!(x[1], 0.1, 1e-15);
    }

    #[test]
    fn pendulum_equilibria() {
        let p = PendulumPlant::default();
        let eq = equilibrium(&p, 2.0, 1e-10).unwrap();
        assert_close!(eq[0], 0.5f64.asin(), 1e-8);
        assert_close!(eq[1], 0.0, 1e-8);
        let origin = equilibrium(&p, 0.0, 1e-10).unwrap();
        assert_eq!(origin, StateVector::zeros(2));
        assert_close!(p.admissible_boundary(), 4.0 * 0.6f64.sin(), 1e-15);
    }

    #[test]
    fn saturate_clamps() {
        let i = InputInterval::new(-3.0, 3.0).unwrap();
        assert_eq!(saturate(&i, 5.0), 3.0);
        assert_eq!(saturate(&i, 1.2), 1.2);
        assert_eq!(saturate(&i, -7.0), -3.0);
    }

    #[test]
    fn invalid_interval_and_unstable_plant_rejected() {
        assert!(InputInterval::new(1.0, 1.0).is_err());
        assert!(InputInterval::new(0.0, f64::INFINITY).is_err());
        let i = InputInterval::new(-1.0, 1.0).unwrap();
        assert!(LinearPlant::scalar(1.0, 1.0, i).is_err());
        assert!(LinearPlant::scalar(-1.2, 1.0, i).is_err());
    }

    #[test]
    fn equilibrium_reports_non_convergence() {
        let p = LinearPlant::scalar(0.999, 1.0, InputInterval::new(-1.0, 1.0).unwrap()).unwrap();
        let err = equilibrium_with_cap(&p, 1.0, 1e-12, 10).unwrap_err();
        assert!(matches!(err, GovernError::NonConvergence { steps: 10, .. }));
    }

    #[test]
    fn non_finite_state_is_a_domain_violation() {
        let p = PendulumPlant::default();
        let x = StateVector::from_vec(vec![f64::NAN, 0.0]);
        assert!(matches!(step(&p, &x, 0.0), Err(GovernError::PlantDomain(_))));
    }

    #[test]
    fn combined_outputs_mix_and_induced_curvature() {
        let base = DualOutputPendulum::default();
        let mix = DMatrix::from_row_slice(1, 2, &[1.0, -50.0]);
        let p = CombinedOutputs::new(base, mix, DVector::from_element(1, 0.1)).unwrap();
        let x = StateVector::from_vec(vec![0.2, -0.3]);
        let y = base.h(&x, 0.0);
        assert_close!(p.h(&x, 0.0)[0], y[0] - 50.0 * y[1] + 0.1, 1e-14);
        assert_eq!(p.induced_curvature(&[0.5, 0.01]), vec![1.0]);
    }

    #[test]
    fn plant_spec_parses_pendulum_json() {
        let spec: PlantSpec = serde_json::from_str(
            r#"{"kind": "pendulum", "Ts": 0.05, "a": 4.0, "b": 1.5, "c": 1.0}"#,
        )
        .unwrap();
        assert_eq!(spec, PlantSpec::default());
        let plant = spec.build().unwrap();
        assert_eq!(plant.n_y(), 1);
        assert_eq!(plant.input_interval(), InputInterval { lo: -3.0, hi: 3.0 });
    }

    #[test]
    fn plant_spec_defaults_and_rejects_unknown_keys() {
        let spec: PlantSpec = serde_json::from_str(r#"{"kind": "dual_pendulum", "x2_max": 0.8}"#).unwrap();
        let PlantSpec::DualPendulum { dynamics, x2_max, .. } = spec else {
            panic!("wrong variant");
        };
        assert_eq!(dynamics, PendulumDynamics::default());
        assert_eq!(x2_max, 0.8);
        assert!(serde_json::from_str::<PlantSpec>(r#"{"kind": "pendulum", "bogus": 1}"#).is_err());
        let text = serde_json::to_string(&PlantSpec::default()).unwrap();
        assert_eq!(serde_json::from_str::<PlantSpec>(&text).unwrap(), PlantSpec::default());
    }
}
