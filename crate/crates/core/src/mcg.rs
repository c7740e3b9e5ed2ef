//! Exact multi-timestep command governor.
//!
//! Each step solves, over `z = [v(0..=N), eps_1..eps_ny]`,
//!
//! ```text
//! min  sum_j (r - v(j))^2 + rho_s sum_{j<N} (v(j) - v(j+1))^2 + sum_i rho_i eps_i^2
//! s.t. y_i(j) <= eps_i   (outputs of the predicted rollout, j = 0..=N)
//!      v(j) in V, eps_i >= 0
//! ```
//!
//! and applies `v(0)`. Constraint Jacobians are the output sensitivities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GovernError, Result};
use crate::optim::{self, BoxBounds, NlpProblem, SolveReport, SolverOptions};
use crate::plant::{PlantModel, StateVector};
use crate::sensitivity::{linearize, nominal_rollout, CommandSequence};

fn default_rho() -> f64 {
    1e8
}
fn default_rho_s() -> f64 {
    1e4
}
fn default_horizon() -> usize {
    11
}

/// Penalty weights and horizon shared by the exact and network governors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GovernorWeights {
    /// Slack penalty used for every output without its own entry.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Command-rate penalty.
    #[serde(default = "default_rho_s")]
    pub rho_s: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Optional per-output slack penalties.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_outputs: Option<Vec<f64>>,
}

impl Default for GovernorWeights {
    fn default() -> Self {
        Self {
            rho: default_rho(),
            rho_s: default_rho_s(),
            horizon: default_horizon(),
            rho_outputs: None,
        }
    }
}

impl GovernorWeights {
    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn slack_weight(&self, output: usize) -> f64 {
        self.rho_outputs
            .as_ref()
            .and_then(|r| r.get(output).copied())
            .unwrap_or(self.rho)
    }

    pub fn validate(&self, n_y: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(GovernError::contract("horizon must be at least 1"));
        }
        if !(self.rho >= 0.0 && self.rho_s >= 0.0) {
            return Err(GovernError::contract("penalty weights must be non-negative"));
        }
        if let Some(r) = &self.rho_outputs {
            if r.len() != n_y || r.iter().any(|w| !(*w >= 0.0)) {
                return Err(GovernError::contract(format!(
                    "per-output slack weights need {n_y} non-negative entries"
                )));
            }
        }
        Ok(())
    }

    /// Number of decision variables for `n_y` outputs.
    pub fn dim(&self, n_y: usize) -> usize {
        self.horizon + 1 + n_y
    }
}

/// Quadratic form `(H, g, offset)` of the governor cost in `z = [V; eps]`.
pub fn governor_objective(weights: &GovernorWeights, n_y: usize, r: f64) -> (DMatrix<f64>, DVector<f64>, f64) {
    let steps = weights.horizon + 1;
    let n = steps + n_y;
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    for j in 0..steps {
        h[(j, j)] += 2.0;
        g[j] = -2.0 * r;
    }
    for j in 0..weights.horizon {
        let w = 2.0 * weights.rho_s;
        h[(j, j)] += w;
        h[(j + 1, j + 1)] += w;
        h[(j, j + 1)] -= w;
        h[(j + 1, j)] -= w;
    }
    for i in 0..n_y {
        h[(steps + i, steps + i)] = 2.0 * weights.slack_weight(i);
    }
    (h, g, steps as f64 * r * r)
}

/// Governor cost evaluated term by term.
pub fn objective_value(weights: &GovernorWeights, r: f64, commands: &[f64], slack: &[f64]) -> f64 {
    let tracking: f64 = commands.iter().map(|v| (r - v).powi(2)).sum();
    let rate: f64 = commands.windows(2).map(|w| (w[0] - w[1]).powi(2)).sum();
    let penalty: f64 = slack
        .iter()
        .enumerate()
        .map(|(i, e)| weights.slack_weight(i) * e * e)
        .sum();
    tracking + weights.rho_s * rate + penalty
}

/// Box bounds on `[V; eps]`.
pub fn governor_bounds(plant: &dyn PlantModel, weights: &GovernorWeights) -> BoxBounds {
    let steps = weights.horizon + 1;
    let iv = plant.input_interval();
    let n_y = plant.n_y();
    let mut lo = vec![iv.lo; steps];
    let mut hi = vec![iv.hi; steps];
    lo.extend(std::iter::repeat_n(0.0, n_y));
    hi.extend(std::iter::repeat_n(f64::INFINITY, n_y));
    BoxBounds { lo, hi }
}

/// Result of one governor step.
#[derive(Debug, Clone)]
pub struct GovernorDecision {
    pub v_applied: f64,
    pub commands: CommandSequence,
    /// Per-output slack.
    pub slack: Vec<f64>,
    pub solve: SolveReport,
    /// Set when the solver failed and the previous command was held.
    pub held: bool,
    /// Sequence the decision was expanded around, when there is one.
    pub nominal: Option<CommandSequence>,
}

impl GovernorDecision {
    pub fn max_slack(&self) -> f64 {
        self.slack.iter().copied().fold(0.0, f64::max)
    }
}

/// The governor NLP at one `(x, r)`.
pub struct McgProblem<'a> {
    plant: &'a dyn PlantModel,
    x: &'a StateVector,
    steps: usize,
    n_y: usize,
    h: DMatrix<f64>,
    g: DVector<f64>,
    offset: f64,
    bounds: BoxBounds,
}

impl<'a> McgProblem<'a> {
    pub fn new(plant: &'a dyn PlantModel, weights: &GovernorWeights, x: &'a StateVector, r: f64) -> Result<Self> {
        weights.validate(plant.n_y())?;
        if x.len() != plant.n_x() {
            return Err(GovernError::contract("state dimension does not match the plant"));
        }
        let (h, g, offset) = governor_objective(weights, plant.n_y(), r);
        Ok(Self {
            plant,
            x,
            steps: weights.horizon + 1,
            n_y: plant.n_y(),
            h,
            g,
            offset,
            bounds: governor_bounds(plant, weights),
        })
    }

    /// Warm point with the smallest slack making it feasible.
    pub fn feasible_start(&self, commands: &[f64]) -> Result<DVector<f64>> {
        let traj = nominal_rollout(self.plant, self.x, commands)?;
        let mut z = DVector::zeros(self.steps + self.n_y);
        for (j, &v) in commands.iter().enumerate() {
            z[j] = v;
        }
        for i in 0..self.n_y {
            z[self.steps + i] = traj.y.iter().map(|y| y[i]).fold(0.0, f64::max);
        }
        Ok(z)
    }
}

impl NlpProblem for McgProblem<'_> {
    fn dim(&self) -> usize {
        self.steps + self.n_y
    }

    fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }

    fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z) + self.offset
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.h * z + &self.g
    }

    fn constraints(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let traj = nominal_rollout(self.plant, self.x, &z.as_slice()[..self.steps])?;
        Ok(DVector::from_fn(self.n_y * self.steps, |row, _| {
            let (i, j) = (row / self.steps, row % self.steps);
            traj.y[j][i] - z[self.steps + i]
        }))
    }

    fn constraints_with_jacobian(&self, z: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let bundle = linearize(self.plant, self.x, &z.as_slice()[..self.steps])?;
        let m = self.n_y * self.steps;
        let mut values = DVector::zeros(m);
        let mut jac = DMatrix::zeros(m, self.dim());
        for i in 0..self.n_y {
            for j in 0..self.steps {
                let row = i * self.steps + j;
                values[row] = bundle.y_nom[j][i] - z[self.steps + i];
                for (k, s) in bundle.s_y_row(i, j).iter().enumerate().take(j + 1) {
                    jac[(row, k)] = *s;
                }
                jac[(row, self.steps + i)] = -1.0;
            }
        }
        Ok((values, jac))
    }

    fn hessian_seed(&self) -> DMatrix<f64> {
        self.h.clone()
    }
}

/// Solve the governor problem at `(x, r)` from `warm` and return the first
/// command. A solver that stops at its iteration cap still yields a decision;
/// the report carries the status.
pub fn mcg_step(
    plant: &dyn PlantModel,
    weights: &GovernorWeights,
    x: &StateVector,
    r: f64,
    warm: &CommandSequence,
    opts: &SolverOptions,
) -> Result<GovernorDecision> {
    if !r.is_finite() {
        return Err(GovernError::contract("reference must be finite"));
    }
    if warm.horizon() != weights.horizon {
        return Err(GovernError::contract(format!(
            "warm start horizon {} does not match governor horizon {}",
            warm.horizon(),
            weights.horizon
        )));
    }
    let problem = McgProblem::new(plant, weights, x, r)?;
    let warm = warm.saturated(&plant.input_interval());
    let z0 = problem.feasible_start(warm.as_slice())?;
    let report = optim::solve_nlp(&problem, &z0, opts)?;
    Ok(decision_from(report, weights.horizon + 1, plant.n_y()))
}

pub(crate) fn decision_from(report: SolveReport, steps: usize, n_y: usize) -> GovernorDecision {
    let z = &report.z_star;
    let commands = CommandSequence::new(z.as_slice()[..steps].to_vec())
        .expect("governor horizon is at least one");
    let slack = (0..n_y).map(|i| z[steps + i].max(0.0)).collect();
    GovernorDecision {
        v_applied: commands.first(),
        commands,
        slack,
        solve: report,
        held: false,
        nominal: None,
    }
}

/// Shift a sequence one step left, holding the last entry.
pub fn warm_shift(prev: &CommandSequence) -> CommandSequence {
    let v = prev.as_slice();
    let mut next = v[1..].to_vec();
    next.push(v[v.len() - 1]);
    CommandSequence::new(next).expect("shifting preserves length")
}

/// Receding-horizon exact governor carrying its warm start between steps.
#[derive(Debug, Clone)]
pub struct McgGovernor {
    pub weights: GovernorWeights,
    pub options: SolverOptions,
    warm: Option<CommandSequence>,
}

impl McgGovernor {
    pub fn new(weights: GovernorWeights) -> Self {
        Self {
            weights,
            options: SolverOptions::nlp(),
            warm: None,
        }
    }

    pub fn with_options(mut self, options: SolverOptions) -> Self {
        self.options = options;
        self
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    pub fn step(&mut self, plant: &dyn PlantModel, x: &StateVector, r: f64) -> Result<GovernorDecision> {
        let warm = self
            .warm
            .take()
            .unwrap_or_else(|| CommandSequence::constant(plant.input_interval().saturate(r), self.weights.horizon));
        let decision = mcg_step(plant, &self.weights, x, r, &warm, &self.options)?;
        self.warm = Some(warm_shift(&decision.commands));
        Ok(decision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{equilibrium, step, PendulumPlant};

    #[test]
    fn warm_shift_holds_last_entry() {
        let s = CommandSequence::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(warm_shift(&s).as_slice(), &[2.0, 3.0, 3.0]);
        let c = CommandSequence::constant(0.7, 4);
        assert_eq!(warm_shift(&c), c);
    }

    #[test]
    fn quadratic_form_matches_termwise_cost() {
        let w = GovernorWeights::default().with_horizon(4);
        let (h, g, off) = governor_objective(&w, 2, 1.3);
        let v = [0.1, -0.5, 2.0, 1.0, 1.3];
        let e = [1e-3, 0.02];
        let z = DVector::from_iterator(7, v.iter().chain(e.iter()).copied());
        let quad = 0.5 * z.dot(&(&h * &z)) + g.dot(&z) + off;
        let direct = objective_value(&w, 1.3, &v, &e);
        assert_close!(quad, direct, 1e-9 * direct.abs());
    }

    #[test]
    fn idle_when_reference_is_admissible() {
        let p = PendulumPlant::default();
        let w = GovernorWeights::default();
        let x = equilibrium(&p, 1.0, 1e-12).unwrap();
        let warm = CommandSequence::constant(1.0, w.horizon);
        let d = mcg_step(&p, &w, &x, 1.0, &warm, &SolverOptions::nlp()).unwrap();
        assert!(d.solve.is_optimal(), "{:?}", d.solve);
        assert_close!(d.v_applied, 1.0, 1e-6);
        for &v in d.commands.as_slice() {
            assert_close!(v, 1.0, 1e-6);
        }
        assert!(d.max_slack() <= 1e-9);
    }

    #[test]
    fn governs_a_step_past_the_admissible_boundary() {
        let p = PendulumPlant::default();
        let mut gov = McgGovernor::new(GovernorWeights::default());
        let mut x = equilibrium(&p, 0.0, 1e-12).unwrap();
        let mut applied = 0.0;
        for _ in 0..400 {
            let d = gov.step(&p, &x, 3.0).unwrap();
            assert!(p.h(&x, d.v_applied)[0] <= d.max_slack() + 1e-6);
            applied = d.v_applied;
            x = step(&p, &x, applied).unwrap();
        }
        assert_close!(applied, p.admissible_boundary(), 1e-2);
    }

    #[test]
    fn horizon_mismatch_is_rejected() {
        let p = PendulumPlant::default();
        let w = GovernorWeights::default();
        let warm = CommandSequence::constant(0.0, 3);
        let x = StateVector::zeros(2);
        assert!(mcg_step(&p, &w, &x, 0.0, &warm, &SolverOptions::nlp()).is_err());
    }
}
