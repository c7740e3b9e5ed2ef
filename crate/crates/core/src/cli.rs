//! `govern collect|train|calibrate|run|benchmark --config <path> [--set k=v]...`
//!
//! Every command reads one JSON [`RunConfig`]; missing sections take their
//! defaults and `--set` overrides dotted paths before validation. Relative
//! paths in the config are resolved against the config file's directory.
//! Each artifact is written next to a `.provenance.json` stamp holding the
//! hashes of the effective config and of every input and output file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{GovernError, Result};
use crate::mcg::{GovernorWeights, McgGovernor};
use crate::nn::{load_net, save_net, train, FeedforwardNet, TrainOptions, TrainingDataset};
use crate::nnmcg::{tune_mbar, CalibrationOptions, CalibrationStatus, NnmcgConfig, NnmcgGovernor};
use crate::optim::{SolverOptions, DEFAULT_MAX_ITER, NLP_TOL, QP_TOL};
use crate::plant::{PlantModel, PlantSpec, StateVector};
use crate::sensitivity::RemainderBound;
use crate::sim::{
    adversarial_profile, benchmark, collect_dataset, initial_state, make_profile, run_closed_loop, Governor,
    ProfileSpec, ReferenceProfile,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_CALIBRATION_CAP: i32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Profiles {
    pub collection: ProfileSpec,
    pub calibration: ProfileSpec,
    pub evaluation: ProfileSpec,
}

impl Default for Profiles {
    fn default() -> Self {
        Self {
            collection: ProfileSpec::PrbsSteps {
                seed: 1,
                total_steps: 9200,
                lo: -3.0,
                hi: 3.0,
                min_dwell: 50,
                max_dwell: 400,
            },
            calibration: adversarial_profile(),
            evaluation: adversarial_profile(),
        }
    }
}

/// Artifact locations. `traces` and `reports` are directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub net: PathBuf,
    pub mbar: PathBuf,
    pub traces: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "dataset.csv".into(),
            net: "net.json".into(),
            mbar: "mbar.json".into(),
            traces: "traces".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub qp: f64,
    pub nlp: f64,
    pub max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            qp: QP_TOL,
            nlp: NLP_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

impl Tolerances {
    fn qp(&self) -> SolverOptions {
        SolverOptions {
            tol: self.qp,
            max_iter: self.max_iter,
        }
    }

    fn nlp(&self) -> SolverOptions {
        SolverOptions {
            tol: self.nlp,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub repeats: usize,
    pub methods: Vec<GovernorKind>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            repeats: 5,
            methods: vec![GovernorKind::NaiveNn, GovernorKind::NnMcg, GovernorKind::Mcg],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GovernorKind {
    None,
    NaiveNn,
    Mcg,
    NnMcg,
}

impl GovernorKind {
    fn name(self) -> &'static str {
        match self {
            GovernorKind::None => "none",
            GovernorKind::NaiveNn => "naive-nn",
            GovernorKind::Mcg => "mcg",
            GovernorKind::NnMcg => "nn-mcg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plant: PlantSpec,
    pub weights: GovernorWeights,
    /// Simulations start at the equilibrium under this command.
    pub initial_command: f64,
    pub nn: TrainOptions,
    pub profiles: Profiles,
    pub paths: Paths,
    pub tolerances: Tolerances,
    pub calibration: CalibrationOptions,
    pub benchmark: BenchmarkConfig,
    /// Largest share of non-optimal collection steps before `collect` fails.
    pub max_flagged_fraction: f64,
    /// Curvature bounds to use instead of the calibrated file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mbar: Option<Vec<f64>>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            plant: PlantSpec::default(),
            weights: GovernorWeights::default(),
            initial_command: 0.0,
            nn: TrainOptions::default(),
            profiles: Profiles::default(),
            paths: Paths::default(),
            tolerances: Tolerances::default(),
            calibration: CalibrationOptions::default(),
            benchmark: BenchmarkConfig::default(),
            max_flagged_fraction: 0.01,
            mbar: None,
            base_dir: PathBuf::new(),
        }
    }
}

impl RunConfig {
    /// Parse config text, apply `key=value` overrides and validate.
    pub fn from_json(text: &str, overrides: &[String], context: &str) -> Result<Self> {
        let parse_err = |message: String| GovernError::Parse {
            context: context.to_string(),
            message,
        };
        let raw: RunConfig = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        let mut value = serde_json::to_value(&raw).map_err(|e| parse_err(e.to_string()))?;
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let config: RunConfig =
            serde_json::from_value(value).map_err(|e| parse_err(format!("after overrides: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GovernError::io(path, e))?;
        let mut config = Self::from_json(&text, overrides, &path.display().to_string())?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let plant = self.plant.build()?;
        self.weights.validate(plant.n_y())?;
        if let Some(m) = &self.mbar {
            if m.len() != plant.n_y() {
                return Err(GovernError::contract(format!(
                    "mbar has {} entries, plant has {} outputs",
                    m.len(),
                    plant.n_y()
                )));
            }
            RemainderBound::new(m.clone())?;
        }
        if !(self.tolerances.qp > 0.0 && self.tolerances.nlp > 0.0 && self.tolerances.max_iter > 0) {
            return Err(GovernError::contract("tolerances must be positive"));
        }
        if !(0.0..=1.0).contains(&self.max_flagged_fraction) {
            return Err(GovernError::contract("max_flagged_fraction must lie in [0, 1]"));
        }
        if self.benchmark.repeats == 0 {
            return Err(GovernError::contract("benchmark.repeats must be at least 1"));
        }
        Ok(())
    }

    fn plant(&self) -> Result<Box<dyn PlantModel>> {
        self.plant.build()
    }

    fn initial_state(&self, plant: &dyn PlantModel) -> Result<StateVector> {
        initial_state(plant, self.initial_command)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    fn dataset_path(&self) -> PathBuf {
        self.resolve(&self.paths.dataset)
    }

    fn net_path(&self) -> PathBuf {
        self.resolve(&self.paths.net)
    }

    fn mbar_path(&self) -> PathBuf {
        self.resolve(&self.paths.mbar)
    }

    fn trace_path(&self, kind: GovernorKind) -> PathBuf {
        self.resolve(&self.paths.traces).join(format!("{}.csv", kind.name()))
    }

    fn report_path(&self, name: &str) -> PathBuf {
        self.resolve(&self.paths.reports).join(name)
    }

    /// Serialized form with paths as written, so the hash does not depend
    /// on where the config lives.
    fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Set `a.b.c=value` inside a JSON tree. The value is read as JSON when it
/// parses, otherwise as a plain string. Numeric segments index arrays.
pub fn apply_override(root: &mut Value, item: &str) -> Result<()> {
    let usage = |message: String| GovernError::Parse {
        context: format!("--set {item}"),
        message,
    };
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| usage("expected key=value".into()))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(usage("empty key segment".into()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let segments: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (depth, seg) in segments.iter().enumerate() {
        let last = depth + 1 == segments.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(seg.to_string(), value);
                    return Ok(());
                }
                map.entry(seg.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| usage(format!("`{seg}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| usage(format!("index {idx} out of range (length {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(usage(format!(
                    "`{}` is not an object",
                    segments[..depth].join(".")
                )))
            }
        };
    }
    unreachable!("loop returns on the last segment")
}

#[derive(Debug, Parser)]
#[command(name = "govern", version, about = "Command governor pipeline: collect, train, calibrate, run, benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config entry by dotted path, e.g. `--set nn.trials=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the exact governor on the collection profile and write the dataset.
    Collect(Common),
    /// Train networks on the dataset and keep the best one.
    Train {
        #[command(flatten)]
        common: Common,
        /// Shorthand for `--set nn.trials=<n>`.
        #[arg(long)]
        trials: Option<usize>,
        /// Shorthand for `--set nn.seed=<n>`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tune the curvature bounds on the calibration profile.
    Calibrate(Common),
    /// Simulate one governor on the evaluation profile and write its trace.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        governor: GovernorKind,
    },
    /// Time the configured governors on the evaluation profile.
    Benchmark(Common),
}

/// Parse arguments, execute, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &GovernError) -> i32 {
    match e {
        GovernError::Contract(_) | GovernError::Parse { .. } | GovernError::Io { .. } => EXIT_USAGE,
        GovernError::PlantDomain(_)
        | GovernError::NonConvergence { .. }
        | GovernError::Solver(_)
        | GovernError::Training(_) => EXIT_NUMERICAL,
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Collect(c) => cmd_collect(&RunConfig::load(&c.config, &c.overrides)?),
        Command::Train { common, trials, seed } => {
            let mut overrides = common.overrides.clone();
            overrides.extend(trials.map(|t| format!("nn.trials={t}")));
            overrides.extend(seed.map(|s| format!("nn.seed={s}")));
            cmd_train(&RunConfig::load(&common.config, &overrides)?)
        }
        Command::Calibrate(c) => cmd_calibrate(&RunConfig::load(&c.config, &c.overrides)?),
        Command::Run { common, governor } => {
            cmd_run(&RunConfig::load(&common.config, &common.overrides)?, governor)
        }
        Command::Benchmark(c) => cmd_benchmark(&RunConfig::load(&c.config, &c.overrides)?),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| GovernError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| GovernError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| GovernError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| GovernError::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Input and output hashes of one command, keyed by file name.
#[derive(Debug, Serialize)]
struct Provenance<'a> {
    command: &'a str,
    config_sha256: String,
    plant: &'a PlantSpec,
    plant_sha256: String,
    weights: &'a GovernorWeights,
    #[serde(skip_serializing_if = "Option::is_none")]
    profile: Option<&'a ProfileSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    profile_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    details: BTreeMap<String, Value>,
}

impl<'a> Provenance<'a> {
    fn new(command: &'a str, config: &'a RunConfig) -> Self {
        Self {
            command,
            config_sha256: sha256_hex(config.canonical_json().as_bytes()),
            plant: &config.plant,
            plant_sha256: sha256_hex(serde_json::to_string(&config.plant).expect("plant serializes").as_bytes()),
            weights: &config.weights,
            profile: None,
            profile_id: None,
            seed: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            details: BTreeMap::new(),
        }
    }

    fn with_profile(mut self, spec: &'a ProfileSpec, profile: &ReferenceProfile) -> Self {
        self.profile = Some(spec);
        self.profile_id = Some(profile.id());
        self.seed = profile.seed;
        self
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(file_name(path), file_hash(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(file_name(path), file_hash(path)?);
        Ok(())
    }

    fn detail(&mut self, key: &str, value: impl Serialize) {
        self.details
            .insert(key.to_string(), serde_json::to_value(value).expect("detail serializes"));
    }

    /// Write next to `artifact` as `<artifact>.provenance.json`.
    fn write_for(&self, artifact: &Path) -> Result<()> {
        let mut name = artifact.as_os_str().to_owned();
        name.push(".provenance.json");
        write_json(Path::new(&name), self)
    }
}

pub fn cmd_collect(config: &RunConfig) -> Result<i32> {
    let plant = config.plant()?;
    let x0 = config.initial_state(plant.as_ref())?;
    let profile = make_profile(&config.profiles.collection)?;
    let collection = collect_dataset(plant.as_ref(), &config.weights, &profile, &x0, &config.tolerances.nlp())?;
    let fraction = collection.flagged as f64 / collection.total.max(1) as f64;
    if fraction > config.max_flagged_fraction {
        return Err(GovernError::Solver(format!(
            "{} of {} collection steps were not solved to optimality ({:.2}% > {:.2}% allowed)",
            collection.flagged,
            collection.total,
            100.0 * fraction,
            100.0 * config.max_flagged_fraction
        )));
    }
    let path = config.dataset_path();
    let path = path.as_path();
    write_file(path, collection.dataset.to_csv().as_bytes())?;

    let mut prov = Provenance::new("collect", config).with_profile(&config.profiles.collection, &profile);
    prov.output(path)?;
    prov.detail("records", collection.dataset.len());
    prov.detail("flagged", collection.flagged);
    prov.write_for(path)?;
    println!(
        "collected {} records ({} flagged) -> {}",
        collection.dataset.len(),
        collection.flagged,
        path.display()
    );
    Ok(EXIT_OK)
}

pub fn cmd_train(config: &RunConfig) -> Result<i32> {
    let dataset = TrainingDataset::load(&config.dataset_path())?;
    if dataset.horizon() != config.weights.horizon {
        return Err(GovernError::contract(format!(
            "dataset horizon {} differs from configured horizon {}",
            dataset.horizon(),
            config.weights.horizon
        )));
    }
    let (net, report) = train(&dataset, &config.nn)?;
    save_net(&net, &config.net_path())?;
    let report_path = config.report_path("train_report.json");
    write_json(&report_path, &report)?;

    let mut prov = Provenance::new("train", config);
    prov.seed = Some(config.nn.seed);
    prov.input(&config.dataset_path())?;
    prov.output(&config.net_path())?;
    prov.output(&report_path)?;
    prov.write_for(&config.net_path())?;
    println!(
        "trained hidden {:?}: rmse {:.6e}, validation rmse {:.6e} -> {}",
        report.hidden_sizes,
        report.final_rmse,
        report.validation_rmse,
        config.net_path().display()
    );
    Ok(EXIT_OK)
}

fn load_checked_net(config: &RunConfig) -> Result<FeedforwardNet> {
    let net = load_net(&config.net_path())?;
    if net.horizon() != config.weights.horizon {
        return Err(GovernError::contract(format!(
            "network horizon {} differs from configured horizon {}",
            net.horizon(),
            config.weights.horizon
        )));
    }
    Ok(net)
}

pub fn cmd_calibrate(config: &RunConfig) -> Result<i32> {
    let plant = config.plant()?;
    let x0 = config.initial_state(plant.as_ref())?;
    let net = load_checked_net(config)?;
    let profile = make_profile(&config.profiles.calibration)?;
    let config0 = NnmcgConfig::new(config.weights.clone(), RemainderBound::zeros(plant.n_y()), net)?;
    let report = tune_mbar(
        plant.as_ref(),
        &config0,
        &profile,
        &x0,
        &config.calibration,
        &config.tolerances.qp(),
    )?;
    write_json(&config.mbar_path(), &report.mbar_final)?;
    let report_path = config.report_path("calibration_report.json");
    write_json(&report_path, &report)?;

    let mut prov = Provenance::new("calibrate", config).with_profile(&config.profiles.calibration, &profile);
    prov.input(&config.net_path())?;
    prov.output(&config.mbar_path())?;
    prov.output(&report_path)?;
    prov.write_for(&config.mbar_path())?;
    match report.status {
        CalibrationStatus::Success => {
            println!(
                "calibrated mbar {:?} in {} iterations -> {}",
                report.mbar_final.as_slice(),
                report.iterations,
                config.mbar_path().display()
            );
            Ok(EXIT_OK)
        }
        CalibrationStatus::IterationCap => {
            eprintln!(
                "calibration stopped at the iteration cap: {}",
                report.message.as_deref().unwrap_or("violations persist")
            );
            Ok(EXIT_CALIBRATION_CAP)
        }
    }
}

/// The curvature bounds in force: the config's `mbar` entry if present,
/// otherwise the calibrated file.
fn current_mbar(config: &RunConfig) -> Result<RemainderBound> {
    if let Some(m) = &config.mbar {
        return RemainderBound::new(m.clone());
    }
    let path = config.mbar_path();
    let text = std::fs::read_to_string(&path).map_err(|e| GovernError::io(&path, e))?;
    serde_json::from_str::<RemainderBound>(&text)
        .map_err(|e| GovernError::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })
        .and_then(|m| RemainderBound::new(m.as_slice().to_vec()))
}

fn build_governor(config: &RunConfig, kind: GovernorKind, n_y: usize) -> Result<Governor> {
    Ok(match kind {
        GovernorKind::None => Governor::None,
        GovernorKind::NaiveNn => Governor::NaiveNn(load_checked_net(config)?),
        GovernorKind::Mcg => {
            Governor::Mcg(McgGovernor::new(config.weights.clone()).with_options(config.tolerances.nlp()))
        }
        GovernorKind::NnMcg => {
            let mbar = current_mbar(config)?;
            if mbar.len() != n_y {
                return Err(GovernError::contract("mbar length differs from plant outputs"));
            }
            let nn = NnmcgConfig::new(config.weights.clone(), mbar, load_checked_net(config)?)?;
            Governor::Nnmcg(NnmcgGovernor::new(nn).with_options(config.tolerances.qp()))
        }
    })
}

fn governor_inputs(prov: &mut Provenance, config: &RunConfig, kind: GovernorKind) -> Result<()> {
    if matches!(kind, GovernorKind::NaiveNn | GovernorKind::NnMcg) {
        prov.input(&config.net_path())?;
    }
    if kind == GovernorKind::NnMcg && config.mbar.is_none() {
        prov.input(&config.mbar_path())?;
    }
    Ok(())
}

pub fn cmd_run(config: &RunConfig, kind: GovernorKind) -> Result<i32> {
    let plant = config.plant()?;
    let x0 = config.initial_state(plant.as_ref())?;
    let profile = make_profile(&config.profiles.evaluation)?;
    let mut governor = build_governor(config, kind, plant.n_y())?;
    let trace = run_closed_loop(plant.as_ref(), &mut governor, &profile, &x0)?;
    let path = config.trace_path(kind);
    write_file(&path, trace.to_csv(true).as_bytes())?;

    let mut prov = Provenance::new("run", config).with_profile(&config.profiles.evaluation, &profile);
    governor_inputs(&mut prov, config, kind)?;
    prov.detail("governor", kind.name());
    prov.detail("rows", trace.rows.len());
    prov.detail("max_violation", trace.max_violation());
    prov.detail("max_slack", trace.max_slack());
    if let Some(e) = &trace.error {
        prov.detail("error", e);
    }
    prov.write_for(&path)?;

    if let Some(e) = trace.error {
        return Err(GovernError::Solver(format!(
            "{} run stopped after {} steps: {e}",
            kind.name(),
            trace.rows.len()
        )));
    }
    println!(
        "{}: {} steps, max violation {:.3e}, max slack {:.3e} -> {}",
        kind.name(),
        trace.rows.len(),
        trace.max_violation(),
        trace.max_slack(),
        path.display()
    );
    Ok(EXIT_OK)
}

pub fn cmd_benchmark(config: &RunConfig) -> Result<i32> {
    let plant = config.plant()?;
    let x0 = config.initial_state(plant.as_ref())?;
    let profile = make_profile(&config.profiles.evaluation)?;
    let mut governors = config
        .benchmark
        .methods
        .iter()
        .map(|&k| build_governor(config, k, plant.n_y()))
        .collect::<Result<Vec<_>>>()?;
    let (report, _) = benchmark(
        plant.as_ref(),
        &mut governors,
        &profile,
        &x0,
        config.benchmark.repeats,
        config.calibration.viol_tol,
    )?;
    let path = config.report_path("benchmark.json");
    write_json(&path, &report)?;

    let mut prov = Provenance::new("benchmark", config).with_profile(&config.profiles.evaluation, &profile);
    for &k in &config.benchmark.methods {
        governor_inputs(&mut prov, config, k)?;
    }
    prov.write_for(&path)?;
    for m in &report.methods {
        println!(
            "{:>8}: avg {:.3e} s, worst {:.3e} s, max violation {:.3e}, satisfied {}",
            m.method, m.average_step_time, m.worst_case_step_time, m.max_violation, m.constraint_satisfied
        );
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let c = RunConfig::from_json("{}", &[], "test").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn dotted_overrides_reach_nested_fields() {
        let sets = vec![
            "nn.trials=1".to_string(),
            "weights.rho_s=10".to_string(),
            "nn.hidden_sizes=[[4]]".to_string(),
            "paths.net=other.json".to_string(),
        ];
        let c = RunConfig::from_json("{}", &sets, "test").unwrap();
        assert_eq!(c.nn.trials, 1);
        assert_eq!(c.weights.rho_s, 10.0);
        assert_eq!(c.nn.hidden_sizes, vec![vec![4]]);
        assert_eq!(c.paths.net, PathBuf::from("other.json"));
    }

    #[test]
    fn array_index_override() {
        let mut v = serde_json::json!({"a": [1, 2, 3]});
        apply_override(&mut v, "a.1=7").unwrap();
        assert_eq!(v, serde_json::json!({"a": [1, 7, 3]}));
        assert!(apply_override(&mut v, "a.9=0").is_err());
        assert!(apply_override(&mut v, "a.x=0").is_err());
    }

    #[test]
    fn bad_overrides_are_usage_errors() {
        for bad in ["novalue", "=3", "a..b=1", "nn.bogus=1", "weights.horizon=-1"] {
            let err = RunConfig::from_json("{}", &[bad.to_string()], "test").unwrap_err();
            assert_eq!(exit_code(&err), EXIT_USAGE, "{bad}: {err}");
        }
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        assert!(RunConfig::from_json(r#"{"plnt": {}}"#, &[], "test").is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_directory() {
        let mut c = RunConfig::default();
        c.paths.net = "/abs/net.json".into();
        c.base_dir = "/cfg".into();
        assert_eq!(c.dataset_path(), PathBuf::from("/cfg/dataset.csv"));
        assert_eq!(c.net_path(), PathBuf::from("/abs/net.json"));
        assert_eq!(c.trace_path(GovernorKind::NnMcg), PathBuf::from("/cfg/traces/nn-mcg.csv"));
        let mut d = c.clone();
        d.base_dir = "/elsewhere".into();
        assert_eq!(c.canonical_json(), d.canonical_json());
    }

    #[test]
    fn unknown_governor_is_a_usage_error() {
        let code = run(["govern", "run", "--config", "x.json", "--governor", "fancy"]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn missing_config_is_a_usage_error() {
        let code = run(["govern", "collect", "--config", "/nonexistent/cfg.json"]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn mbar_override_must_match_outputs() {
        let err = RunConfig::from_json(r#"{"mbar": [0.1, 0.2]}"#, &[], "test").unwrap_err();
        assert_eq!(exit_code(&err), EXIT_USAGE);
    }
}
