//! Nominal prediction and first-order trajectory sensitivities.
//!
//! Given a command sequence `V = [v(0), ..., v(N)]` and the current state,
//! the nominal rollout produces `x(j)`, `y(j)` for `j = 0..=N`. The forward
//! recursion
//!
//! ```text
//! S_x(0, k)   = 0
//! S_x(j+1, k) = df/dx(j) S_x(j, k) + [k == j] df/dv(j)
//! S_y(j, k)   = dh/dx(j) S_x(j, k) + [k == j] dh/dv(j)
//! ```
//!
//! gives `dy(j)/dv(k)`, which is both the linear term of the tightened
//! governor constraint and the exact constraint Jacobian for the SQP solver.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GovernError, Result};
use crate::plant::{self, OutputVector, PlantModel, StateVector};

/// Command sequence `[v(0), ..., v(N)]` over a horizon of `N` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CommandSequence(Vec<f64>);

impl CommandSequence {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(GovernError::contract(
                "a command sequence needs at least two entries (horizon >= 1)",
            ));
        }
        Ok(Self(values))
    }

    pub fn constant(v: f64, horizon: usize) -> Self {
        Self(vec![v; horizon.max(1) + 1])
    }

    pub fn horizon(&self) -> usize {
        self.0.len() - 1
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.0[0]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn saturated(&self, interval: &plant::InputInterval) -> Self {
        Self(self.0.iter().map(|&v| interval.saturate(v)).collect())
    }
}

impl std::ops::Index<usize> for CommandSequence {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// States `x(0..=N)` and outputs `y(0..=N)` predicted under a fixed sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalTrajectory {
    pub x: Vec<StateVector>,
    pub y: Vec<OutputVector>,
}

/// Roll the plant forward from `x0` under `commands`.
pub fn nominal_rollout(
    plant: &dyn PlantModel,
    x0: &StateVector,
    commands: &[f64],
) -> Result<NominalTrajectory> {
    if x0.len() != plant.n_x() {
        return Err(GovernError::contract(format!(
            "initial state has length {}, plant expects {}",
            x0.len(),
            plant.n_x()
        )));
    }
    let mut xs = Vec::with_capacity(commands.len());
    let mut ys = Vec::with_capacity(commands.len());
    let mut x = x0.clone();
    for (j, &v) in commands.iter().enumerate() {
        ys.push(plant::output(plant, &x, v)?);
        if j + 1 < commands.len() {
            let next = plant::step(plant, &x, v)?;
            xs.push(std::mem::replace(&mut x, next));
        } else {
            xs.push(x.clone());
        }
    }
    Ok(NominalTrajectory { x: xs, y: ys })
}

/// Nominal trajectory together with the dense lower-triangular sensitivity
/// arrays `S_x(j, k)` and `S_y(i, j, k)`.
#[derive(Debug, Clone)]
pub struct SensitivityBundle {
    pub x_nom: Vec<StateVector>,
    pub y_nom: Vec<OutputVector>,
    n_y: usize,
    steps: usize,
    s_x: Vec<DVector<f64>>,
    s_y: Vec<f64>,
}

impl SensitivityBundle {
    /// Number of predicted points, `N + 1`.
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    pub fn horizon(&self) -> usize {
        self.steps - 1
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    /// `dx(j)/dv(k)`.
    pub fn s_x(&self, j: usize, k: usize) -> &DVector<f64> {
        &self.s_x[j * self.steps + k]
    }

    /// `dy_i(j)/dv(k)`.
    pub fn s_y(&self, i: usize, j: usize, k: usize) -> f64 {
        self.s_y[(i * self.steps + j) * self.steps + k]
    }

    /// Row `dy_i(j)/dv(0..=N)`.
    pub fn s_y_row(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.steps + j) * self.steps;
        &self.s_y[start..start + self.steps]
    }
}

/// Run the forward sensitivity recursion along a nominal trajectory.
pub fn propagate_sensitivities(
    plant: &dyn PlantModel,
    nominal: &NominalTrajectory,
    commands: &[f64],
) -> Result<SensitivityBundle> {
    let steps = commands.len();
    let (n_x, n_y) = (plant.n_x(), plant.n_y());
    if nominal.x.len() != steps || nominal.y.len() != steps {
        return Err(GovernError::contract(format!(
            "nominal trajectory has {} states / {} outputs for {} commands",
            nominal.x.len(),
            nominal.y.len(),
            steps
        )));
    }
    if nominal.x.iter().any(|x| x.len() != n_x) || nominal.y.iter().any(|y| y.len() != n_y) {
        return Err(GovernError::contract(
            "nominal trajectory dimensions do not match the plant",
        ));
    }

    let mut s_x = vec![DVector::zeros(n_x); steps * steps];
    let mut s_y = vec![0.0; n_y * steps * steps];
    for j in 0..steps {
        let (x, v) = (&nominal.x[j], commands[j]);
        let c = plant.jac_h_x(x, v);
        let d = plant.jac_h_v(x, v);
        for k in 0..=j {
            let sy = &c * &s_x[j * steps + k];
            for i in 0..n_y {
                let extra = if k == j { d[i] } else { 0.0 };
                s_y[(i * steps + j) * steps + k] = sy[i] + extra;
            }
        }
        if j + 1 < steps {
            let a = plant.jac_f_x(x, v);
            let b = plant.jac_f_v(x, v);
            for k in 0..j {
                s_x[(j + 1) * steps + k] = &a * &s_x[j * steps + k];
            }
            // S_x(j, j) = 0, so only the direct input term survives
            s_x[(j + 1) * steps + j] = b;
        }
    }
    if s_y.iter().any(|s| !s.is_finite()) {
        return Err(GovernError::PlantDomain(
            "non-finite output sensitivity".into(),
        ));
    }
    Ok(SensitivityBundle {
        x_nom: nominal.x.clone(),
        y_nom: nominal.y.clone(),
        n_y,
        steps,
        s_x,
        s_y,
    })
}

/// Rollout followed by the sensitivity recursion.
pub fn linearize(
    plant: &dyn PlantModel,
    x0: &StateVector,
    commands: &[f64],
) -> Result<SensitivityBundle> {
    let nominal = nominal_rollout(plant, x0, commands)?;
    propagate_sensitivities(plant, &nominal, commands)
}

/// Per-output curvature constants bounding the Taylor remainder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RemainderBound(Vec<f64>);

impl RemainderBound {
    pub fn new(mbar: Vec<f64>) -> Result<Self> {
        if mbar.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(GovernError::contract(format!(
                "curvature bounds must be finite and non-negative, got {mbar:?}"
            )));
        }
        Ok(Self(mbar))
    }

    pub fn zeros(n_y: usize) -> Self {
        Self(vec![0.0; n_y])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for RemainderBound {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Upper bound on `y_i(j)` under `commands`, expanded around `nominal`:
/// linear sensitivity term plus `mbar_i / 2` times the summed squared deviation.
pub fn taylor_upper_bound(
    bundle: &SensitivityBundle,
    mbar: &RemainderBound,
    commands: &[f64],
    nominal: &[f64],
    j: usize,
    output_index: usize,
) -> f64 {
    let row = bundle.s_y_row(output_index, j);
    let mut linear = 0.0;
    let mut squares = 0.0;
    for k in 0..=j {
        let dv = commands[k] - nominal[k];
        linear += row[k] * dv;
        squares += dv * dv;
    }
    bundle.y_nom[j][output_index] + linear + 0.5 * mbar[output_index] * squares
}

#[derive(Debug, Clone)]
pub struct CurvatureOptions {
    /// Random nominal sequences drawn per sample state.
    pub probes: usize,
    pub seed: u64,
    /// Perturbation used by the second differences.
    pub step: f64,
    pub safety_factor: f64,
}

impl Default for CurvatureOptions {
    fn default() -> Self {
        Self {
            probes: 4,
            seed: 0,
            step: 1e-3,
            safety_factor: 1.5,
        }
    }
}

/// Sampled estimate of `sup |d^2 y_i(j) / dv(k)^2|` over the sample states,
/// scaled by a safety factor.
///
/// For each state, `probes` nominal sequences are drawn uniformly from the
/// input interval (stream seeded by the state index, so doubling `probes`
/// only adds samples), and every output's central second difference with
/// respect to each single command coordinate is taken.
pub fn estimate_curvature(
    plant: &dyn PlantModel,
    sample_states: &[StateVector],
    horizon: usize,
    options: &CurvatureOptions,
) -> Result<RemainderBound> {
    let interval = plant.input_interval();
    let h = options.step;
    let (lo, hi) = (interval.lo + h, interval.hi - h);
    let n_y = plant.n_y();
    let mut worst = vec![0.0f64; n_y];
    for (s, x0) in sample_states.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(s as u64);
        for _ in 0..options.probes {
            let base: Vec<f64> = (0..=horizon).map(|_| rng.random_range(lo..=hi)).collect();
            let centre = nominal_rollout(plant, x0, &base)?;
            for k in 0..=horizon {
                let mut plus = base.clone();
                plus[k] += h;
                let mut minus = base.clone();
                minus[k] -= h;
                let up = nominal_rollout(plant, x0, &plus)?;
                let down = nominal_rollout(plant, x0, &minus)?;
                for j in k..=horizon {
                    for i in 0..n_y {
                        let d2 = (up.y[j][i] - 2.0 * centre.y[j][i] + down.y[j][i]) / (h * h);
                        worst[i] = worst[i].max(d2.abs());
                    }
                }
            }
        }
    }
    RemainderBound::new(worst.into_iter().map(|m| m * options.safety_factor).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{equilibrium, InputInterval, LinearPlant, PendulumPlant};

    fn scalar_linear() -> LinearPlant {
        LinearPlant::scalar(0.5, 1.0, InputInterval::new(-3.0, 3.0).unwrap()).unwrap()
    }

    #[test]
    fn linear_rollout_by_hand() {
        let p = scalar_linear();
        let traj = nominal_rollout(&p, &StateVector::zeros(1), &[1.0, 1.0, 1.0]).unwrap();
        let xs: Vec<f64> = traj.x.iter().map(|x| x[0]).collect();
        let ys: Vec<f64> = traj.y.iter().map(|y| y[0]).collect();
        assert_eq!(xs, vec![0.0, 1.0, 1.5]);
        assert_eq!(ys, vec![0.0, 1.0, 1.5]);
    }

    #[test]
    fn rollout_from_equilibrium_is_constant() {
        let p = PendulumPlant::default();
        let eq = equilibrium(&p, 1.0, 1e-12).unwrap();
        let traj = nominal_rollout(&p, &eq, &[1.0, 1.0, 1.0]).unwrap();
        let y0 = p.h(&eq, 1.0)[0];
        for y in &traj.y {
            assert_close!(y[0], y0, 1e-11);
        }
    }

    #[test]
    fn rollout_matches_step_replay() {
        let p = PendulumPlant::default();
        let x0 = StateVector::from_vec(vec![0.1, 0.0]);
        let cmds = vec![2.0; 12];
        let traj = nominal_rollout(&p, &x0, &cmds).unwrap();
        let mut x = x0;
        for (j, &v) in cmds.iter().enumerate() {
            assert_eq!(traj.y[j], p.h(&x, v));
            x = plant::step(&p, &x, v).unwrap();
        }
    }

    #[test]
    fn linear_sensitivities_closed_form() {
        let p = scalar_linear();
        let cmds = [1.0, 1.0, 1.0];
        let b = linearize(&p, &StateVector::zeros(1), &cmds).unwrap();
        for k in 0..3 {
            assert_eq!(b.s_x(0, k)[0], 0.0);
        }
        assert_eq!(b.s_y(0, 1, 0), 1.0);
        assert_eq!(b.s_y(0, 2, 0), 0.5);
        for j in 0..3 {
            assert_eq!(b.s_y(0, j, j), 0.0);
        }
        assert_eq!(b.s_y(0, 0, 2), 0.0);
    }

    #[test]
    fn mismatched_trajectory_is_a_contract_error() {
        let p = PendulumPlant::default();
        let traj = nominal_rollout(&p, &StateVector::zeros(2), &[0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            propagate_sensitivities(&p, &traj, &[0.0, 0.0]),
            Err(GovernError::Contract(_))
        ));
        assert!(nominal_rollout(&p, &StateVector::zeros(3), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn upper_bound_at_nominal_is_nominal_output() {
        let p = PendulumPlant::default();
        let cmds = [0.5, 1.0, 1.5, 2.0];
        let b = linearize(&p, &StateVector::from_vec(vec![0.2, -0.4]), &cmds).unwrap();
        let m = RemainderBound::new(vec![3.0]).unwrap();
        for j in 0..4 {
            assert_eq!(taylor_upper_bound(&b, &m, &cmds, &cmds, j, 0), b.y_nom[j][0]);
        }
    }

    #[test]
    fn negative_curvature_rejected() {
        assert!(RemainderBound::new(vec![-1.0]).is_err());
        assert!(RemainderBound::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn curvature_of_linear_plant_vanishes() {
        let p = scalar_linear();
        let states: Vec<_> = (0..5).map(|i| StateVector::from_element(1, i as f64)).collect();
        let m = estimate_curvature(&p, &states, 4, &CurvatureOptions::default()).unwrap();
        assert!(m[0] <= 1e-8, "{}", m[0]);
    }
}
