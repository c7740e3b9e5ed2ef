//! Network-guided governor with sensitivity-tightened constraints.
//!
//! Each step takes the network's command sequence as the nominal `V_nom`,
//! linearizes the plant along it and solves the convex QCQP
//!
//! ```text
//! min  governor cost
//! s.t. y_nom_i(j) + sum_{k<=j} S_y(i,j,k) dv(k) + mbar_i/2 sum_{k<=j} dv(k)^2 <= eps_i
//! ```
//!
//! with `dv = v - v_nom`. The curvature constants `mbar` are calibrated by
//! closed-loop simulation.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{GovernError, Result};
use crate::mcg::{decision_from, governor_bounds, governor_objective, GovernorDecision, GovernorWeights};
use crate::nn::{infer, FeedforwardNet};
use crate::optim::{solve_qcqp, BoxBounds, QcqpProblem, QuadConstraint, SolveStatus, SolverOptions};
use crate::plant::{PlantModel, StateVector};
use crate::sensitivity::{linearize, nominal_rollout, taylor_upper_bound, CommandSequence, RemainderBound, SensitivityBundle};
use crate::sim::{run_closed_loop, Governor, ReferenceProfile, SimulationTrace};

/// Largest amount by which a replayed output may exceed its predicted upper
/// bound before the bound counts as violated (rounding only).
pub const DOMINANCE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct NnmcgConfig {
    pub weights: GovernorWeights,
    pub mbar: RemainderBound,
    pub net: FeedforwardNet,
}

impl NnmcgConfig {
    pub fn new(weights: GovernorWeights, mbar: RemainderBound, net: FeedforwardNet) -> Result<Self> {
        if net.horizon() != weights.horizon {
            return Err(GovernError::contract(format!(
                "network emits horizon {} but governor horizon is {}",
                net.horizon(),
                weights.horizon
            )));
        }
        net.validate()?;
        Ok(Self { weights, mbar, net })
    }
}

/// Assemble the tightened problem around `nominal`. Rows are ordered output
/// major: row `i * (N + 1) + j` bounds output `i` at prediction step `j`.
pub fn build_tightened_qcqp(
    bundle: &SensitivityBundle,
    mbar: &RemainderBound,
    nominal: &CommandSequence,
    r: f64,
    weights: &GovernorWeights,
    bounds: BoxBounds,
) -> Result<QcqpProblem> {
    let steps = weights.horizon + 1;
    let n_y = bundle.n_y();
    if bundle.len() != steps || nominal.len() != steps {
        return Err(GovernError::contract(format!(
            "sensitivities cover {} steps and nominal {} steps, governor needs {steps}",
            bundle.len(),
            nominal.len()
        )));
    }
    if mbar.len() != n_y {
        return Err(GovernError::contract(format!(
            "curvature bound has {} entries for {n_y} outputs",
            mbar.len()
        )));
    }
    let n = steps + n_y;
    if bounds.len() != n {
        return Err(GovernError::contract("box bounds do not match the decision vector"));
    }
    let v_nom = nominal.as_slice();
    let (h, g, offset) = governor_objective(weights, n_y, r);
    let mut constraints = Vec::with_capacity(n_y * steps);
    for i in 0..n_y {
        let m = mbar[i];
        for j in 0..steps {
            let row = bundle.s_y_row(i, j);
            let mut p = DVector::zeros(n);
            let mut q = DVector::zeros(n);
            let mut c = bundle.y_nom[j][i];
            for k in 0..=j {
                p[k] = m;
                q[k] = row[k] - m * v_nom[k];
                c += -row[k] * v_nom[k] + 0.5 * m * v_nom[k] * v_nom[k];
            }
            q[steps + i] = -1.0;
            constraints.push(QuadConstraint { p_diag: p, q, c });
        }
    }
    QcqpProblem::new(h, g, offset, constraints, bounds)
}

/// One network-guided step: infer, saturate, linearize, solve the tightened
/// QCQP. Solver errors are returned; the caller decides how to fall back.
pub fn nnmcg_step(
    plant: &dyn PlantModel,
    config: &NnmcgConfig,
    x: &StateVector,
    r: f64,
    opts: &SolverOptions,
) -> Result<GovernorDecision> {
    if !r.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(GovernError::contract("state and reference must be finite"));
    }
    let nominal = infer(&config.net, x, r)?.saturated(&plant.input_interval());
    let bundle = linearize(plant, x, nominal.as_slice())?;
    let problem = build_tightened_qcqp(
        &bundle,
        &config.mbar,
        &nominal,
        r,
        &config.weights,
        governor_bounds(plant, &config.weights),
    )?;
    let steps = nominal.len();
    let mut warm = DVector::zeros(problem.dim());
    for (j, &v) in nominal.as_slice().iter().enumerate() {
        warm[j] = v;
    }
    for i in 0..plant.n_y() {
        warm[steps + i] = bundle.y_nom.iter().map(|y| y[i]).fold(0.0, f64::max);
    }
    let report = solve_qcqp(&problem, Some(&warm), opts)?;
    let mut decision = decision_from(report, steps, plant.n_y());
    decision.nominal = Some(nominal);
    Ok(decision)
}

/// Receding-horizon network governor. When the QCQP fails it holds the
/// previously applied command.
#[derive(Debug, Clone)]
pub struct NnmcgGovernor {
    pub config: NnmcgConfig,
    pub options: SolverOptions,
    last_applied: Option<f64>,
}

impl NnmcgGovernor {
    pub fn new(config: NnmcgConfig) -> Self {
        Self {
            config,
            options: SolverOptions::qp(),
            last_applied: None,
        }
    }

    pub fn with_options(mut self, options: SolverOptions) -> Self {
        self.options = options;
        self
    }

    pub fn reset(&mut self) {
        self.last_applied = None;
    }

    pub fn step(&mut self, plant: &dyn PlantModel, x: &StateVector, r: f64) -> Result<GovernorDecision> {
        let mut decision = nnmcg_step(plant, &self.config, x, r, &self.options)?;
        if decision.solve.status == SolveStatus::InfeasibleNumerics {
            let hold = match self.last_applied {
                Some(v) => v,
                None => decision.nominal.as_ref().map_or(decision.v_applied, CommandSequence::first),
            };
            log::warn!("tightened QCQP failed; holding command {hold}");
            decision.v_applied = hold;
            decision.commands = CommandSequence::constant(hold, self.config.weights.horizon);
            decision.held = true;
        }
        self.last_applied = Some(decision.v_applied);
        Ok(decision)
    }
}

/// Tuning knobs of the curvature calibration loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationOptions {
    pub viol_tol: f64,
    pub increment_factor: f64,
    /// Value an output's bound jumps to when first escalated from zero.
    pub seed_value: f64,
    pub max_iterations: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            viol_tol: 1e-6,
            increment_factor: 2.0,
            seed_value: 1e-3,
            max_iterations: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationStatus {
    Success,
    IterationCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub mbar_final: RemainderBound,
    pub iterations: usize,
    pub status: CalibrationStatus,
    /// Per iteration: largest realized output excess over the recorded slack.
    pub max_violation_history: Vec<f64>,
    /// Per iteration: largest amount a replayed output exceeded its bound.
    pub bound_shortfall_history: Vec<f64>,
    pub profile_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Per-output excess of realized outputs over the recorded slack.
pub fn realized_violation(trace: &SimulationTrace, n_y: usize) -> Vec<f64> {
    let mut worst = vec![0.0f64; n_y];
    for row in &trace.rows {
        for i in 0..n_y {
            let eps = row.eps.get(i).copied().unwrap_or(0.0);
            worst[i] = worst[i].max(row.y[i] - eps);
        }
    }
    worst
}

/// Replay each non-held step of an NN-MCG trace: roll the plant under the
/// chosen sequence from the recorded state and compare every predicted
/// output with its tightened upper bound. Returns the per-output largest
/// excess of the rollout over the bound (zero or negative when dominated).
pub fn bound_shortfall(plant: &dyn PlantModel, mbar: &RemainderBound, trace: &SimulationTrace) -> Result<Vec<f64>> {
    let n_y = plant.n_y();
    let mut worst = vec![f64::NEG_INFINITY; n_y];
    for row in &trace.rows {
        let (Some(chosen), Some(nominal)) = (&row.commands, &row.nominal) else {
            continue;
        };
        if row.held {
            continue;
        }
        let x = StateVector::from_column_slice(&row.x);
        let bundle = linearize(plant, &x, nominal.as_slice())?;
        let actual = nominal_rollout(plant, &x, chosen.as_slice())?;
        for j in 0..chosen.len() {
            for (i, w) in worst.iter_mut().enumerate() {
                let bound = taylor_upper_bound(&bundle, mbar, chosen.as_slice(), nominal.as_slice(), j, i);
                *w = w.max(actual.y[j][i] - bound);
            }
        }
    }
    Ok(worst.into_iter().map(|w| if w.is_finite() { w } else { 0.0 }).collect())
}

/// Calibrate the curvature bounds: start from `config0.mbar` (normally zero),
/// simulate the closed loop on `profile`, and escalate every output that
/// either exceeds its recorded slack by more than `viol_tol` or whose
/// replayed outputs escape their predicted bounds. Stops when no output
/// needs escalation or the iteration cap is reached.
pub fn tune_mbar(
    plant: &dyn PlantModel,
    config0: &NnmcgConfig,
    profile: &ReferenceProfile,
    x0: &StateVector,
    opts: &CalibrationOptions,
    solver: &SolverOptions,
) -> Result<CalibrationReport> {
    if !(opts.increment_factor > 1.0 && opts.seed_value > 0.0 && opts.viol_tol >= 0.0) {
        return Err(GovernError::contract(
            "calibration needs increment factor > 1, positive seed value and non-negative tolerance",
        ));
    }
    let n_y = plant.n_y();
    let mut mbar = config0.mbar.as_slice().to_vec();
    if mbar.len() != n_y {
        return Err(GovernError::contract("curvature bound length differs from plant outputs"));
    }
    let mut violations = Vec::new();
    let mut shortfalls = Vec::new();
    for iteration in 1..=opts.max_iterations {
        let mut config = config0.clone();
        config.mbar = RemainderBound::new(mbar.clone())?;
        let mut governor = Governor::Nnmcg(NnmcgGovernor::new(config.clone()).with_options(*solver));
        let trace = run_closed_loop(plant, &mut governor, profile, x0)?;
        if let Some(err) = &trace.error {
            return Err(GovernError::Solver(format!("calibration run aborted: {err}")));
        }
        let viol = realized_violation(&trace, n_y);
        let short = bound_shortfall(plant, &config.mbar, &trace)?;
        let worst_viol = viol.iter().copied().fold(0.0, f64::max);
        let worst_short = short.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        log::info!("calibration iteration {iteration}: mbar {mbar:?}, violation {worst_viol:e}, bound shortfall {worst_short:e}");
        violations.push(worst_viol);
        shortfalls.push(worst_short);

        let escalate: Vec<bool> = (0..n_y)
            .map(|i| viol[i] > opts.viol_tol || short[i] > DOMINANCE_TOL)
            .collect();
        if !escalate.contains(&true) {
            return Ok(CalibrationReport {
                mbar_final: config.mbar,
                iterations: iteration,
                status: CalibrationStatus::Success,
                max_violation_history: violations,
                bound_shortfall_history: shortfalls,
                profile_id: profile.id(),
                message: None,
            });
        }
        for (m, up) in mbar.iter_mut().zip(&escalate) {
            if *up {
                *m = if *m > 0.0 { *m * opts.increment_factor } else { opts.seed_value };
            }
        }
    }
    Ok(CalibrationReport {
        mbar_final: RemainderBound::new(mbar)?,
        iterations: opts.max_iterations,
        status: CalibrationStatus::IterationCap,
        max_violation_history: violations,
        bound_shortfall_history: shortfalls,
        profile_id: profile.id(),
        message: Some(
            "iteration cap reached without a violation-free run; collect more data and retrain the network".into(),
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer, Normalization};
    use crate::plant::{equilibrium, InputInterval, LinearPlant, PendulumPlant};

    /// Network whose output is the constant sequence `c`.
    fn constant_net(n_x: usize, horizon: usize, c: f64) -> FeedforwardNet {
        FeedforwardNet {
            input_dim: n_x + 1,
            output_dim: horizon + 1,
            normalization: Normalization::identity(n_x + 1),
            output_normalization: None,
            layers: vec![Layer {
                rows: horizon + 1,
                cols: n_x + 1,
                w: vec![0.0; (horizon + 1) * (n_x + 1)],
                b: vec![c; horizon + 1],
                activation: Activation::Linear,
            }],
        }
    }

    #[test]
    fn zero_curvature_gives_linear_rows() {
        let p = PendulumPlant::default();
        let w = GovernorWeights::default();
        let nominal = CommandSequence::constant(1.0, w.horizon);
        let bundle = linearize(&p, &StateVector::from_vec(vec![0.3, 0.1]), nominal.as_slice()).unwrap();
        let q = build_tightened_qcqp(&bundle, &RemainderBound::zeros(1), &nominal, 2.0, &w, governor_bounds(&p, &w)).unwrap();
        assert!(q.constraints.iter().all(QuadConstraint::is_linear));
        assert_eq!(q.constraints.len(), 12);
        assert_eq!(q.dim(), 13);
    }

    #[test]
    fn zero_deviation_point_is_feasible() {
        let p = PendulumPlant::default();
        let w = GovernorWeights::default();
        let nominal = CommandSequence::new((0..12).map(|k| -2.0 + 0.4 * k as f64).collect()).unwrap();
        let bundle = linearize(&p, &StateVector::from_vec(vec![0.5, 1.0]), nominal.as_slice()).unwrap();
        let mbar = RemainderBound::new(vec![7.0]).unwrap();
        let q = build_tightened_qcqp(&bundle, &mbar, &nominal, 0.0, &w, governor_bounds(&p, &w)).unwrap();
        let mut z = DVector::zeros(13);
        for j in 0..12 {
            z[j] = nominal[j];
        }
        z[12] = bundle.y_nom.iter().map(|y| y[0]).fold(0.0, f64::max);
        for c in &q.constraints {
            assert!(c.value(&z) <= 1e-12, "{}", c.value(&z));
        }
    }

    #[test]
    fn constraint_reproduces_the_taylor_bound() {
        let p = PendulumPlant::default();
        let w = GovernorWeights::default().with_horizon(4);
        let nominal = CommandSequence::new(vec![0.5, 1.0, 1.5, 1.0, 0.0]).unwrap();
        let bundle = linearize(&p, &StateVector::from_vec(vec![0.2, -0.3]), nominal.as_slice()).unwrap();
        let mbar = RemainderBound::new(vec![2.5]).unwrap();
        let q = build_tightened_qcqp(&bundle, &mbar, &nominal, 1.0, &w, governor_bounds(&p, &w)).unwrap();
        let v = [0.7, 0.2, 2.0, -1.0, 0.3];
        let eps = 0.01;
        let z = DVector::from_column_slice(&v).push(eps);
        for j in 0..5 {
            let expected = taylor_upper_bound(&bundle, &mbar, &v, nominal.as_slice(), j, 0) - eps;
            assert_close!(q.constraints[j].value(&z), expected, 1e-12);
        }
    }

    #[test]
    fn exact_network_on_linear_plant_matches_mcg() {
        // With a zero-curvature plant the tightened QCQP is the governor QP
        // itself, whatever the nominal sequence.
        let p = LinearPlant::scalar(0.8, 0.1, InputInterval::new(-3.0, 3.0).unwrap()).unwrap();
        let w = GovernorWeights::default().with_horizon(5);
        let x = StateVector::from_element(1, 0.3);
        let config = NnmcgConfig::new(w.clone(), RemainderBound::zeros(1), constant_net(1, 5, 0.5)).unwrap();
        let nn = nnmcg_step(&p, &config, &x, 2.0, &SolverOptions::qp()).unwrap();
        let exact = crate::mcg::mcg_step(
            &p,
            &w,
            &x,
            2.0,
            &CommandSequence::constant(0.0, 5),
            &SolverOptions::nlp().with_tol(1e-10),
        )
        .unwrap();
        assert!(nn.solve.is_optimal());
        for (a, b) in nn.commands.as_slice().iter().zip(exact.commands.as_slice()) {
            assert_close!(*a, *b, 1e-6);
        }
    }

    #[test]
    fn horizon_mismatch_rejected() {
        let w = GovernorWeights::default();
        assert!(NnmcgConfig::new(w, RemainderBound::zeros(1), constant_net(2, 4, 0.0)).is_err());
    }

    #[test]
    fn larger_curvature_never_lowers_the_optimum() {
        let p = PendulumPlant::default();
        let w = GovernorWeights::default();
        let x = StateVector::from_vec(vec![0.45, 0.6]);
        let mut last = f64::NEG_INFINITY;
        for m in [0.0, 0.5, 2.0, 8.0, 32.0] {
            let config = NnmcgConfig::new(w.clone(), RemainderBound::new(vec![m]).unwrap(), constant_net(2, 11, 2.5)).unwrap();
            let d = nnmcg_step(&p, &config, &x, 3.0, &SolverOptions::qp()).unwrap();
            assert!(d.solve.is_optimal());
            assert!(d.solve.objective >= last - 1e-6 * (1.0 + last.abs()), "{m}: {} < {last}", d.solve.objective);
            last = d.solve.objective;
        }
    }

    #[test]
    fn idles_on_an_admissible_reference() {
        let p = PendulumPlant::default();
        let w = GovernorWeights::default();
        let x = equilibrium(&p, 1.0, 1e-12).unwrap();
        let config = NnmcgConfig::new(w, RemainderBound::new(vec![1.0]).unwrap(), constant_net(2, 11, 1.0)).unwrap();
        let d = nnmcg_step(&p, &config, &x, 1.0, &SolverOptions::qp()).unwrap();
        assert_close!(d.v_applied, 1.0, 1e-6);
        assert!(d.max_slack() <= crate::optim::QP_TOL, "{:?}", d);
    }
}
