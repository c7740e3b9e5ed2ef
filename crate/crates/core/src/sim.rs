//! Closed-loop simulation, reference profiles and timing benchmarks.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GovernError, Result};
use crate::mcg::{GovernorWeights, McgGovernor};
use crate::nn::{infer, FeedforwardNet, Record, TrainingDataset};
use crate::nnmcg::NnmcgGovernor;
use crate::optim::{SolveStatus, SolverOptions};
use crate::plant::{self, PlantModel, StateVector};
use crate::sensitivity::CommandSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Steps,
    PrbsSteps,
    DriveCycleLike,
}

fn default_min_dwell() -> usize {
    50
}
fn default_max_dwell() -> usize {
    400
}

/// Declarative description of a reference profile, as found in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileSpec {
    /// Piecewise-constant levels switching at the given steps.
    Steps {
        breakpoints: Vec<(usize, f64)>,
        total_steps: usize,
    },
    /// Random levels held for random dwell times.
    PrbsSteps {
        seed: u64,
        total_steps: usize,
        lo: f64,
        hi: f64,
        #[serde(default = "default_min_dwell")]
        min_dwell: usize,
        #[serde(default = "default_max_dwell")]
        max_dwell: usize,
    },
    /// Random mix of holds, ramps and jumps.
    DriveCycleLike {
        seed: u64,
        total_steps: usize,
        lo: f64,
        hi: f64,
    },
}

/// Piecewise-constant reference `r(t)` for `t = 0..total_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceProfile {
    pub kind: ProfileKind,
    /// `(step, level)` pairs with strictly increasing steps, the first at 0.
    pub breakpoints: Vec<(usize, f64)>,
    pub total_steps: usize,
    pub seed: Option<u64>,
    /// Declared command range containing every level.
    pub range: (f64, f64),
}

impl ReferenceProfile {
    pub fn new(
        kind: ProfileKind,
        breakpoints: Vec<(usize, f64)>,
        total_steps: usize,
        seed: Option<u64>,
        range: (f64, f64),
    ) -> Result<Self> {
        if total_steps == 0 {
            return Err(GovernError::contract("profile needs at least one step"));
        }
        if breakpoints.first().map(|b| b.0) != Some(0) {
            return Err(GovernError::contract("profile breakpoints must start at step 0"));
        }
        if breakpoints.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(GovernError::contract("profile breakpoints must be strictly increasing"));
        }
        if breakpoints
            .iter()
            .any(|b| !(b.1.is_finite() && b.1 >= range.0 && b.1 <= range.1))
        {
            return Err(GovernError::contract(format!(
                "profile levels must be finite and lie in [{}, {}]",
                range.0, range.1
            )));
        }
        Ok(Self {
            kind,
            breakpoints,
            total_steps,
            seed,
            range,
        })
    }

    pub fn level(&self, t: usize) -> f64 {
        let idx = self.breakpoints.partition_point(|b| b.0 <= t);
        self.breakpoints[idx.saturating_sub(1)].1
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.total_steps).map(|t| self.level(t)).collect()
    }

    /// Short identifier naming kind, seed and length.
    pub fn id(&self) -> String {
        let kind = match self.kind {
            ProfileKind::Steps => "steps",
            ProfileKind::PrbsSteps => "prbs_steps",
            ProfileKind::DriveCycleLike => "drive_cycle_like",
        };
        match self.seed {
            Some(s) => format!("{kind}/seed={s}/steps={}", self.total_steps),
            None => format!("{kind}/steps={}", self.total_steps),
        }
    }
}

/// Build a profile. Generated kinds are deterministic in their seed.
pub fn make_profile(spec: &ProfileSpec) -> Result<ReferenceProfile> {
    match *spec {
        ProfileSpec::Steps {
            ref breakpoints,
            total_steps,
        } => {
            if breakpoints.is_empty() {
                return Err(GovernError::contract("steps profile needs at least one level"));
            }
            let lo = breakpoints.iter().map(|b| b.1).fold(f64::INFINITY, f64::min);
            let hi = breakpoints.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
            ReferenceProfile::new(ProfileKind::Steps, breakpoints.clone(), total_steps, None, (lo, hi))
        }
        ProfileSpec::PrbsSteps {
            seed,
            total_steps,
            lo,
            hi,
            min_dwell,
            max_dwell,
        } => {
            check_range(lo, hi)?;
            if min_dwell == 0 || max_dwell < min_dwell {
                return Err(GovernError::contract("dwell bounds need 0 < min_dwell <= max_dwell"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut breakpoints = Vec::new();
            let mut t = 0;
            while t < total_steps {
                breakpoints.push((t, rng.random_range(lo..=hi)));
                t += rng.random_range(min_dwell..=max_dwell);
            }
            ReferenceProfile::new(ProfileKind::PrbsSteps, breakpoints, total_steps, Some(seed), (lo, hi))
        }
        ProfileSpec::DriveCycleLike {
            seed,
            total_steps,
            lo,
            hi,
        } => {
            check_range(lo, hi)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut breakpoints = vec![(0, rng.random_range(lo..=hi))];
            let mut t = 0;
            let mut level = breakpoints[0].1;
            while t < total_steps {
                let duration = rng.random_range(30..=300usize);
                let target = rng.random_range(lo..=hi);
                match rng.random_range(0..3u8) {
                    // hold the current level
                    0 => {}
                    // linear ramp to the target
                    1 => {
                        for k in 1..=duration {
                            let v = level + (target - level) * k as f64 / duration as f64;
                            breakpoints.push((t + k, v.clamp(lo, hi)));
                        }
                        level = target;
                    }
                    _ => {
                        breakpoints.push((t + 1, target));
                        level = target;
                    }
                }
                t += duration + 1;
            }
            breakpoints.retain(|b| b.0 < total_steps);
            breakpoints.dedup_by_key(|b| b.0);
            ReferenceProfile::new(ProfileKind::DriveCycleLike, breakpoints, total_steps, Some(seed), (lo, hi))
        }
    }
}

fn check_range(lo: f64, hi: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(GovernError::contract("profile range needs finite lo <= hi"));
    }
    Ok(())
}

/// Steps alternating between low levels and references past the admissible
/// boundary of the default pendulum, so every governor has active
/// constraints and the ungoverned plant overshoots.
pub fn adversarial_profile() -> ProfileSpec {
    let levels = [0.0, 3.0, 0.5, 2.8, -1.0, 3.0, 1.5, 2.5, -2.0, 3.0, 0.0, 2.2, 3.0, 1.0];
    ProfileSpec::Steps {
        breakpoints: levels.iter().enumerate().map(|(k, &v)| (k * 150, v)).collect(),
        total_steps: levels.len() * 150,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    /// No optimization is involved.
    NotApplicable,
    Optimal,
    MaxIter,
    InfeasibleNumerics,
    /// Solver failed; the previous command was held.
    Held,
}

impl std::fmt::Display for StepStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StepStatus::NotApplicable => "n/a",
            StepStatus::Optimal => "optimal",
            StepStatus::MaxIter => "max_iter",
            StepStatus::InfeasibleNumerics => "infeasible_numerics",
            StepStatus::Held => "held",
        })
    }
}

/// A governor together with its per-run state.
#[derive(Debug, Clone)]
pub enum Governor {
    None,
    NaiveNn(FeedforwardNet),
    Mcg(McgGovernor),
    Nnmcg(NnmcgGovernor),
}

/// Everything a governor reports for one step.
#[derive(Debug, Clone)]
pub struct Decision {
    pub v: f64,
    pub eps: Vec<f64>,
    pub status: StepStatus,
    pub commands: Option<CommandSequence>,
    pub nominal: Option<CommandSequence>,
}

impl Governor {
    pub fn name(&self) -> &'static str {
        match self {
            Governor::None => "none",
            Governor::NaiveNn(_) => "naive-nn",
            Governor::Mcg(_) => "mcg",
            Governor::Nnmcg(_) => "nn-mcg",
        }
    }

    pub fn reset(&mut self) {
        match self {
            Governor::Mcg(g) => g.reset(),
            Governor::Nnmcg(g) => g.reset(),
            Governor::None | Governor::NaiveNn(_) => {}
        }
    }

    pub fn decide(&mut self, plant: &dyn PlantModel, x: &StateVector, r: f64) -> Result<Decision> {
        let n_y = plant.n_y();
        let from_solver = |d: crate::mcg::GovernorDecision| Decision {
            v: d.v_applied,
            status: if d.held {
                StepStatus::Held
            } else {
                match d.solve.status {
                    SolveStatus::Optimal => StepStatus::Optimal,
                    SolveStatus::MaxIter => StepStatus::MaxIter,
                    SolveStatus::InfeasibleNumerics => StepStatus::InfeasibleNumerics,
                }
            },
            eps: d.slack,
            commands: Some(d.commands),
            nominal: d.nominal,
        };
        Ok(match self {
            Governor::None => Decision {
                v: r,
                eps: vec![0.0; n_y],
                status: StepStatus::NotApplicable,
                commands: None,
                nominal: None,
            },
            Governor::NaiveNn(net) => {
                let seq = infer(net, x, r)?.saturated(&plant.input_interval());
                Decision {
                    v: seq.first(),
                    eps: vec![0.0; n_y],
                    status: StepStatus::NotApplicable,
                    commands: Some(seq.clone()),
                    nominal: Some(seq),
                }
            }
            Governor::Mcg(g) => from_solver(g.step(plant, x, r)?),
            Governor::Nnmcg(g) => from_solver(g.step(plant, x, r)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub x: Vec<f64>,
    pub r: f64,
    pub v: f64,
    pub y: Vec<f64>,
    pub eps: Vec<f64>,
    pub status: StepStatus,
    pub wall_s: f64,
    pub held: bool,
    /// Full sequence chosen by the governor, when it computes one.
    pub commands: Option<CommandSequence>,
    /// Sequence the decision was expanded around.
    pub nominal: Option<CommandSequence>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub governor: String,
    pub profile_id: String,
    pub n_x: usize,
    pub n_y: usize,
    pub rows: Vec<TraceRow>,
    /// Set when the run stopped early; `rows` holds the steps completed.
    pub error: Option<String>,
}

impl SimulationTrace {
    pub fn applied(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.v).collect()
    }

    /// Largest output value over the run, clipped at zero.
    pub fn max_violation(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| r.y.iter().copied())
            .fold(0.0, f64::max)
    }

    /// Largest slack recorded at any step for any output.
    pub fn max_slack(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| r.eps.iter().copied())
            .fold(0.0, f64::max)
    }

    /// Largest excess of an output over the slack recorded at its step.
    pub fn max_excess_over_slack(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| r.y.iter().zip(&r.eps).map(|(y, e)| y - e))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["t".to_string()];
        cols.extend((0..self.n_x).map(|k| format!("x{k}")));
        cols.push("r".into());
        cols.push("v".into());
        cols.extend((0..self.n_y).map(|k| format!("y{k}")));
        cols.extend((0..self.n_y).map(|k| format!("eps{k}")));
        cols.push("status".into());
        cols.push("wall_s".into());
        cols.join(",")
    }

    /// CSV export. With `include_wall_time = false` the timing column is
    /// left empty so that reruns compare byte for byte.
    pub fn to_csv(&self, include_wall_time: bool) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{}", row.t);
            for v in row.x.iter().chain([row.r, row.v].iter()).chain(&row.y).chain(&row.eps) {
                let _ = write!(out, ",{v:.16e}");
            }
            let _ = write!(out, ",{}", row.status);
            if include_wall_time {
                let _ = write!(out, ",{:e}", row.wall_s);
            } else {
                out.push(',');
            }
            out.push('\n');
        }
        out
    }
}

/// Run `governor` against `profile` from `x0`. Governor time is measured
/// with a monotonic clock around the decision only. A plant-domain error or
/// governor failure stops the run and is recorded in `error`.
pub fn run_closed_loop(
    plant: &dyn PlantModel,
    governor: &mut Governor,
    profile: &ReferenceProfile,
    x0: &StateVector,
) -> Result<SimulationTrace> {
    if x0.len() != plant.n_x() {
        return Err(GovernError::contract("initial state dimension does not match the plant"));
    }
    let opbox = plant.operating_box();
    if x0.iter().zip(&opbox).any(|(v, (lo, hi))| !(v >= lo && v <= hi)) {
        return Err(GovernError::contract(format!(
            "initial state {:?} lies outside the operating box",
            x0.as_slice()
        )));
    }
    governor.reset();
    let mut trace = SimulationTrace {
        governor: governor.name().to_string(),
        profile_id: profile.id(),
        n_x: plant.n_x(),
        n_y: plant.n_y(),
        rows: Vec::with_capacity(profile.total_steps),
        error: None,
    };
    let mut x = x0.clone();
    for t in 0..profile.total_steps {
        let r = profile.level(t);
        let start = Instant::now();
        let decision = governor.decide(plant, &x, r);
        let wall_s = start.elapsed().as_secs_f64();
        let decision = match decision {
            Ok(d) => d,
            Err(e) => {
                trace.error = Some(format!("step {t}: {e}"));
                break;
            }
        };
        let y = match plant::output(plant, &x, decision.v) {
            Ok(y) => y,
            Err(e) => {
                trace.error = Some(format!("step {t}: {e}"));
                break;
            }
        };
        let next = plant::step(plant, &x, decision.v);
        trace.rows.push(TraceRow {
            t,
            x: x.iter().copied().collect(),
            r,
            v: decision.v,
            y: y.iter().copied().collect(),
            eps: decision.eps,
            held: decision.status == StepStatus::Held,
            status: decision.status,
            wall_s,
            commands: decision.commands,
            nominal: decision.nominal,
        });
        match next {
            Ok(n) => x = n,
            Err(e) => {
                trace.error = Some(format!("step {t}: {e}"));
                break;
            }
        }
    }
    Ok(trace)
}

/// Default initial state: the equilibrium under a constant command.
pub fn initial_state(plant: &dyn PlantModel, command: f64) -> Result<StateVector> {
    plant::equilibrium(plant, command, 1e-12)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    /// Mean over steps of the per-step minimum across repeats, seconds.
    pub average_step_time: f64,
    /// Largest per-step minimum across repeats, seconds.
    pub worst_case_step_time: f64,
    /// Every output stays within its recorded slack plus the tolerance.
    pub constraint_satisfied: bool,
    pub max_violation: f64,
    /// Root mean square difference of the applied command from the MCG run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracking_rmse_vs_mcg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub profile_id: String,
    pub total_steps: usize,
    pub repeats: usize,
    pub viol_tol: f64,
    pub methods: Vec<MethodReport>,
}

impl BenchmarkReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// RMSE between two command histories of equal length.
pub fn command_rmse(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()).max(1);
    (a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / n as f64).sqrt()
}

/// Simulate each governor `repeats` times on the same profile. Per step the
/// fastest of the repeats is kept; the average and worst case are taken over
/// those minima. Returns the report and the first trace of each method.
pub fn benchmark(
    plant: &dyn PlantModel,
    governors: &mut [Governor],
    profile: &ReferenceProfile,
    x0: &StateVector,
    repeats: usize,
    viol_tol: f64,
) -> Result<(BenchmarkReport, Vec<SimulationTrace>)> {
    if repeats == 0 {
        return Err(GovernError::contract("benchmark needs at least one repeat"));
    }
    let mut traces = Vec::with_capacity(governors.len());
    let mut timings = Vec::with_capacity(governors.len());
    for gov in governors.iter_mut() {
        let mut first: Option<SimulationTrace> = None;
        let mut best = vec![f64::INFINITY; profile.total_steps];
        for _ in 0..repeats {
            let trace = run_closed_loop(plant, gov, profile, x0)?;
            if let Some(e) = &trace.error {
                return Err(GovernError::Solver(format!("{} run failed: {e}", gov.name())));
            }
            for (b, row) in best.iter_mut().zip(&trace.rows) {
                *b = b.min(row.wall_s);
            }
            first.get_or_insert(trace);
        }
        traces.push(first.expect("at least one repeat"));
        timings.push(best);
    }
    let mcg = traces.iter().find(|t| t.governor == "mcg").map(SimulationTrace::applied);
    let methods = traces
        .iter()
        .zip(&timings)
        .map(|(trace, best)| MethodReport {
            method: trace.governor.clone(),
            average_step_time: best.iter().sum::<f64>() / best.len().max(1) as f64,
            worst_case_step_time: best.iter().copied().fold(0.0, f64::max),
            constraint_satisfied: trace.max_excess_over_slack() <= viol_tol,
            max_violation: trace.max_violation(),
            tracking_rmse_vs_mcg: mcg.as_ref().map(|m| command_rmse(&trace.applied(), m)),
        })
        .collect();
    Ok((
        BenchmarkReport {
            profile_id: profile.id(),
            total_steps: profile.total_steps,
            repeats,
            viol_tol,
            methods,
        },
        traces,
    ))
}

/// Dataset gathered from an MCG run, with the count of steps whose solve
/// was not optimal (left out of the dataset).
#[derive(Debug, Clone)]
pub struct Collection {
    pub dataset: TrainingDataset,
    pub flagged: usize,
    pub total: usize,
}

/// Run the exact governor on `profile` and label every step with its
/// optimal command sequence.
pub fn collect_dataset(
    plant: &dyn PlantModel,
    weights: &GovernorWeights,
    profile: &ReferenceProfile,
    x0: &StateVector,
    solver: &SolverOptions,
) -> Result<Collection> {
    let mut governor = Governor::Mcg(McgGovernor::new(weights.clone()).with_options(*solver));
    let trace = run_closed_loop(plant, &mut governor, profile, x0)?;
    if let Some(e) = trace.error {
        return Err(GovernError::Solver(format!("data collection run failed: {e}")));
    }
    let total = trace.rows.len();
    let mut records = Vec::with_capacity(total);
    for row in trace.rows {
        match (row.status, row.commands) {
            (StepStatus::Optimal, Some(commands)) => records.push(Record {
                x: StateVector::from_vec(row.x),
                r: row.r,
                commands,
            }),
            _ => log::debug!("step {} flagged ({}); excluded from the dataset", row.t, row.status),
        }
    }
    let flagged = total - records.len();
    Ok(Collection {
        dataset: TrainingDataset::new(plant.n_x(), weights.horizon, records)?,
        flagged,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::PendulumPlant;

    #[test]
    fn steps_profile_switches_at_breakpoints() {
        let p = make_profile(&ProfileSpec::Steps {
            breakpoints: vec![(0, 1.0), (100, 3.0)],
            total_steps: 200,
        })
        .unwrap();
        assert_eq!(p.level(0), 1.0);
        assert_eq!(p.level(99), 1.0);
        assert_eq!(p.level(100), 3.0);
        assert_eq!(p.values().len(), 200);
    }

    #[test]
    fn bad_breakpoints_rejected() {
        for bp in [vec![(5, 1.0)], vec![(0, 1.0), (10, 2.0), (10, 3.0)], vec![(0, f64::NAN)]] {
            assert!(make_profile(&ProfileSpec::Steps {
                breakpoints: bp,
                total_steps: 20
            })
            .is_err());
        }
    }

    #[test]
    fn generated_profiles_are_seeded() {
        for spec in [
            ProfileSpec::PrbsSteps {
                seed: 3,
                total_steps: 9200,
                lo: -3.0,
                hi: 3.0,
                min_dwell: 50,
                max_dwell: 400,
            },
            ProfileSpec::DriveCycleLike {
                seed: 3,
                total_steps: 3000,
                lo: -3.0,
                hi: 3.0,
            },
        ] {
            let a = make_profile(&spec).unwrap();
            assert_eq!(a, make_profile(&spec).unwrap());
            assert!(a.values().iter().all(|v| (-3.0..=3.0).contains(v)));
        }
    }

    #[test]
    fn prbs_dwell_times_and_level_coverage() {
        let p = make_profile(&ProfileSpec::PrbsSteps {
            seed: 11,
            total_steps: 9200,
            lo: -3.0,
            hi: 3.0,
            min_dwell: 50,
            max_dwell: 400,
        })
        .unwrap();
        let bp = &p.breakpoints;
        assert!(bp.windows(2).all(|w| (50..=400).contains(&(w[1].0 - w[0].0))));
        assert!(bp.len() >= 10);
        let lo = bp.iter().map(|b| b.1).fold(f64::INFINITY, f64::min);
        let hi = bp.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
        assert!(lo < 0.0 && hi > PendulumPlant::default().admissible_boundary());
    }

    #[test]
    fn ungoverned_plant_idles_and_overshoots() {
        let p = PendulumPlant::default();
        let x0 = initial_state(&p, 1.0).unwrap();
        let flat = make_profile(&ProfileSpec::Steps {
            breakpoints: vec![(0, 1.0)],
            total_steps: 300,
        })
        .unwrap();
        let trace = run_closed_loop(&p, &mut Governor::None, &flat, &x0).unwrap();
        assert_eq!(trace.rows.len(), 300);
        assert!(trace.rows.iter().all(|r| r.y[0] <= 0.0));

        let step = make_profile(&ProfileSpec::Steps {
            breakpoints: vec![(0, 1.0), (50, 3.0)],
            total_steps: 300,
        })
        .unwrap();
        let trace = run_closed_loop(&p, &mut Governor::None, &step, &x0).unwrap();
        assert!(trace.max_violation() > 0.0);
    }

    #[test]
    fn initial_state_outside_box_rejected() {
        let p = PendulumPlant::default();
        let prof = make_profile(&ProfileSpec::Steps {
            breakpoints: vec![(0, 0.0)],
            total_steps: 5,
        })
        .unwrap();
        let x0 = StateVector::from_vec(vec![5.0, 0.0]);
        assert!(run_closed_loop(&p, &mut Governor::None, &prof, &x0).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let p = PendulumPlant::default();
        let prof = make_profile(&ProfileSpec::Steps {
            breakpoints: vec![(0, 0.5)],
            total_steps: 4,
        })
        .unwrap();
        let trace = run_closed_loop(&p, &mut Governor::None, &prof, &initial_state(&p, 0.0).unwrap()).unwrap();
        let csv = trace.to_csv(true);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,x0,x1,r,v,y0,eps0,status,wall_s");
        assert_eq!(lines.count(), 4);
    }

    #[test]
    fn max_violation_matches_independent_pass() {
        let p = PendulumPlant::default();
        let prof = make_profile(&adversarial_profile()).unwrap();
        let trace = run_closed_loop(&p, &mut Governor::None, &prof, &initial_state(&p, 0.0).unwrap()).unwrap();
        let mut worst = 0.0f64;
        for row in trace.rows.iter().rev() {
            for &y in &row.y {
                if y > worst {
                    worst = y;
                }
            }
        }
        assert_eq!(trace.max_violation(), worst);
    }

    #[test]
    fn single_repeat_keeps_raw_times() {
        let p = PendulumPlant::default();
        let prof = make_profile(&ProfileSpec::Steps {
            breakpoints: vec![(0, 0.5)],
            total_steps: 50,
        })
        .unwrap();
        let x0 = initial_state(&p, 0.0).unwrap();
        let (report, traces) = benchmark(&p, &mut [Governor::None], &prof, &x0, 1, 1e-6).unwrap();
        let raw: Vec<f64> = traces[0].rows.iter().map(|r| r.wall_s).collect();
        let m = &report.methods[0];
        assert_eq!(m.worst_case_step_time, raw.iter().copied().fold(0.0, f64::max));
        assert!(m.worst_case_step_time >= m.average_step_time);
        assert!(m.tracking_rmse_vs_mcg.is_none());
    }
}
