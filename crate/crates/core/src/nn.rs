//! Feedforward approximation of the governor law `(x, r) -> V`.
//!
//! Hidden layers use `tanh`, the output layer is affine. Inputs are
//! z-scored with statistics of the training split; outputs are trained in a
//! z-scored space and mapped back by the output denormalization, while the
//! loss is always measured in command units.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GovernError, Result};
use crate::plant::StateVector;
use crate::sensitivity::CommandSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the activated value.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Linear => 1.0,
        }
    }
}

/// Affine layer with a row-major `rows x cols` weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn forward_into(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for i in 0..self.rows {
            let row = &self.w[i * self.cols..(i + 1) * self.cols];
            let z: f64 = row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>() + self.b[i];
            out.push(self.activation.apply(z));
        }
    }
}

/// Per-feature affine map `normalized = (raw - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(n: usize) -> Self {
        Self {
            shift: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Mean and standard deviation per column. Constant columns keep unit
    /// scale.
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let n = rows.first().map_or(0, Vec::len);
        let count = rows.len().max(1) as f64;
        let mut shift = vec![0.0; n];
        for row in rows {
            for (s, v) in shift.iter_mut().zip(row) {
                *s += v;
            }
        }
        shift.iter_mut().for_each(|s| *s /= count);
        let mut var = vec![0.0; n];
        for row in rows {
            for k in 0..n {
                var[k] += (row[k] - shift[k]).powi(2);
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let sd = (v / count).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { shift, scale }
    }

    pub fn len(&self) -> usize {
        self.shift.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shift.is_empty()
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (s, c))| (v - s) / c)
            .collect()
    }

    pub fn denormalize(&self, normalized: &[f64]) -> Vec<f64> {
        normalized
            .iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (s, c))| v * c + s)
            .collect()
    }

    fn validate(&self, n: usize, what: &str) -> Result<()> {
        if self.shift.len() != n || self.scale.len() != n {
            return Err(GovernError::contract(format!("{what} normalization must have {n} entries")));
        }
        if self.scale.iter().any(|c| !(c.is_finite() && *c > 0.0)) || self.shift.iter().any(|s| !s.is_finite()) {
            return Err(GovernError::contract(format!(
                "{what} normalization needs finite shifts and positive scales"
            )));
        }
        Ok(())
    }
}

/// Network mapping `[x; r]` to a command sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedforwardNet {
    pub input_dim: usize,
    pub output_dim: usize,
    pub normalization: Normalization,
    /// Maps the affine output back to command units; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_normalization: Option<Normalization>,
    pub layers: Vec<Layer>,
}

impl FeedforwardNet {
    /// Check the layer chain, the output activation and the normalizations.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(GovernError::contract("network has no layers"));
        }
        let mut width = self.input_dim;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.cols != width {
                return Err(GovernError::contract(format!(
                    "layer {l} expects {} inputs but receives {width}",
                    layer.cols
                )));
            }
            if layer.w.len() != layer.rows * layer.cols || layer.b.len() != layer.rows {
                return Err(GovernError::contract(format!("layer {l} has inconsistent W or b sizes")));
            }
            if layer.w.iter().chain(&layer.b).any(|v| !v.is_finite()) {
                return Err(GovernError::contract(format!("layer {l} has non-finite parameters")));
            }
            width = layer.rows;
        }
        if width != self.output_dim {
            return Err(GovernError::contract(format!(
                "last layer emits {width} values, output_dim is {}",
                self.output_dim
            )));
        }
        if self.layers.last().map(|l| l.activation) != Some(Activation::Linear) {
            return Err(GovernError::contract("output layer must be linear"));
        }
        self.normalization.validate(self.input_dim, "input")?;
        if let Some(out) = &self.output_normalization {
            out.validate(self.output_dim, "output")?;
        }
        Ok(())
    }

    /// Randomly initialized network (Glorot-uniform weights, zero biases).
    pub fn random(input_dim: usize, hidden: &[usize], output_dim: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut cols = input_dim;
        for (l, &rows) in hidden.iter().chain(std::iter::once(&output_dim)).enumerate() {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            layers.push(Layer {
                rows,
                cols,
                w: (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect(),
                b: vec![0.0; rows],
                activation: if l < hidden.len() {
                    Activation::Tanh
                } else {
                    Activation::Linear
                },
            });
            cols = rows;
        }
        Self {
            input_dim,
            output_dim,
            normalization: Normalization::identity(input_dim),
            output_normalization: None,
            layers,
        }
    }

    /// Horizon `N` of the command sequences this network emits.
    pub fn horizon(&self) -> usize {
        self.output_dim.saturating_sub(1)
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.rows).collect()
    }

    /// Forward pass on an unnormalized input vector.
    pub fn forward(&self, raw: &[f64]) -> Vec<f64> {
        let mut a = self.normalization.normalize(raw);
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.forward_into(&a, &mut next);
            std::mem::swap(&mut a, &mut next);
        }
        match &self.output_normalization {
            Some(out) => out.denormalize(&a),
            None => a,
        }
    }

    /// Multiply every weight matrix by `factor`.
    pub fn scale_weights(&mut self, factor: f64) {
        for layer in &mut self.layers {
            layer.w.iter_mut().for_each(|w| *w *= factor);
        }
    }
}

/// Network prediction of the command sequence at `(x, r)`; not saturated.
pub fn infer(net: &FeedforwardNet, x: &StateVector, r: f64) -> Result<CommandSequence> {
    if x.len() + 1 != net.input_dim {
        return Err(GovernError::contract(format!(
            "network expects {} inputs, got state of length {} plus reference",
            net.input_dim,
            x.len()
        )));
    }
    let mut input: Vec<f64> = x.iter().copied().collect();
    input.push(r);
    CommandSequence::new(net.forward(&input))
}

/// One labeled sample `(x, r) -> V*`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub x: StateVector,
    pub r: f64,
    pub commands: CommandSequence,
}

impl Record {
    fn input(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.x.iter().copied().collect();
        v.push(self.r);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDataset {
    n_x: usize,
    horizon: usize,
    records: Vec<Record>,
}

impl TrainingDataset {
    pub fn new(n_x: usize, horizon: usize, records: Vec<Record>) -> Result<Self> {
        for (k, rec) in records.iter().enumerate() {
            if rec.x.len() != n_x || rec.commands.horizon() != horizon {
                return Err(GovernError::contract(format!(
                    "record {k} does not match state dimension {n_x} and horizon {horizon}"
                )));
            }
            if !(rec.r.is_finite()
                && rec.x.iter().all(|v| v.is_finite())
                && rec.commands.as_slice().iter().all(|v| v.is_finite()))
            {
                return Err(GovernError::contract(format!("record {k} has non-finite entries")));
            }
        }
        Ok(Self { n_x, horizon, records })
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn header(&self) -> String {
        let mut cols: Vec<String> = (0..self.n_x).map(|k| format!("x{k}")).collect();
        cols.push("r".into());
        cols.extend((0..=self.horizon).map(|j| format!("v{j}")));
        cols.join(",")
    }

    /// CSV text, one record per row, 17 significant digits per value.
    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for rec in &self.records {
            let values = rec.input().into_iter().chain(rec.commands.as_slice().iter().copied());
            for (k, v) in values.enumerate() {
                if k > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v:.16e}");
            }
            out.push('\n');
        }
        out
    }

    /// Parse CSV text produced by [`TrainingDataset::to_csv`]. The state
    /// dimension and horizon are read from the header.
    pub fn from_csv(text: &str, context: &str) -> Result<Self> {
        let parse_err = |message: String| GovernError::Parse {
            context: context.to_string(),
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| parse_err("empty dataset file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let n_x = cols.iter().take_while(|c| c.starts_with('x')).count();
        let n_v = cols.len().saturating_sub(n_x + 1);
        let expected: Vec<String> = (0..n_x)
            .map(|k| format!("x{k}"))
            .chain(std::iter::once("r".to_string()))
            .chain((0..n_v).map(|j| format!("v{j}")))
            .collect();
        if n_v < 2 || cols != expected {
            return Err(parse_err(format!("line 1: unexpected header `{header}`")));
        }
        let mut records = Vec::new();
        for (idx, line) in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(parse_err(format!(
                    "line {}: expected {} fields, found {}",
                    idx + 1,
                    cols.len(),
                    fields.len()
                )));
            }
            let mut values = Vec::with_capacity(fields.len());
            for (f, name) in fields.iter().zip(&cols) {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(format!("line {}, field {name}: cannot parse `{f}`", idx + 1)))?;
                values.push(v);
            }
            records.push(Record {
                x: StateVector::from_column_slice(&values[..n_x]),
                r: values[n_x],
                commands: CommandSequence::new(values[n_x + 1..].to_vec())?,
            });
        }
        Self::new(n_x, n_v - 1, records).map_err(|e| parse_err(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| GovernError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GovernError::io(path, e))?;
        Self::from_csv(&text, &path.display().to_string())
    }
}

/// Root mean squared error over every output coordinate of every record.
pub fn rmse(net: &FeedforwardNet, dataset: &TrainingDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(GovernError::contract("rmse needs a nonempty dataset"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for rec in dataset.records() {
        let out = net.forward(&rec.input());
        if out.len() != rec.commands.len() {
            return Err(GovernError::contract("network output length differs from labels"));
        }
        for (o, t) in out.iter().zip(rec.commands.as_slice()) {
            sum += (o - t).powi(2);
        }
        count += out.len();
    }
    Ok((sum / count as f64).sqrt())
}

pub fn save_net(net: &FeedforwardNet, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(net).map_err(|e| GovernError::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| GovernError::io(path, e))
}

pub fn net_from_json(text: &str, context: &str) -> Result<FeedforwardNet> {
    let net: FeedforwardNet = serde_json::from_str(text).map_err(|e| GovernError::Parse {
        context: context.to_string(),
        message: e.to_string(),
    })?;
    net.validate().map_err(|e| GovernError::Parse {
        context: context.to_string(),
        message: e.to_string(),
    })?;
    Ok(net)
}

pub fn load_net(path: &Path) -> Result<FeedforwardNet> {
    let text = std::fs::read_to_string(path).map_err(|e| GovernError::io(path, e))?;
    net_from_json(&text, &path.display().to_string())
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    /// Candidate architectures, each a list of hidden layer widths.
    pub hidden_sizes: Vec<Vec<usize>>,
    pub trials: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![vec![5], vec![10], vec![20]],
            trials: 3,
            seed: 0,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 5000,
            patience: 50,
            validation_fraction: 0.15,
        }
    }
}

/// Outcome of one architecture/initialization trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub hidden_sizes: Vec<usize>,
    pub trial: usize,
    /// `None` when the loss diverged.
    pub validation_rmse: Option<f64>,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// RMSE of the selected network over the whole dataset, command units.
    pub final_rmse: f64,
    pub validation_rmse: f64,
    pub epochs: usize,
    pub train_size: usize,
    pub validation_size: usize,
    pub seed: u64,
    pub hidden_sizes: Vec<usize>,
    /// Best validation RMSE after each epoch of the selected trial.
    pub checkpoint_history: Vec<f64>,
    pub trials: Vec<TrialSummary>,
}

/// Gradient buffers shaped like the layers.
#[derive(Clone)]
struct Grads {
    w: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl Grads {
    fn zeros_like(net: &FeedforwardNet) -> Self {
        Self {
            w: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            b: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    fn clear(&mut self) {
        self.w.iter_mut().chain(self.b.iter_mut()).for_each(|g| g.fill(0.0));
    }
}

/// Accumulate the gradient of `sum_k (out_k - target_k)^2 * weight` for one
/// sample given in normalized input and normalized target space. `out_scale`
/// maps normalized output error to command units. Returns the loss term.
fn backprop_sample(
    net: &FeedforwardNet,
    input: &[f64],
    target: &[f64],
    out_scale: &[f64],
    weight: f64,
    acts: &mut Vec<Vec<f64>>,
    grads: &mut Grads,
) -> f64 {
    acts.resize(net.layers.len() + 1, Vec::new());
    acts[0].clear();
    acts[0].extend_from_slice(input);
    for (l, layer) in net.layers.iter().enumerate() {
        let (before, after) = acts.split_at_mut(l + 1);
        layer.forward_into(&before[l], &mut after[0]);
    }
    let out = &acts[net.layers.len()];
    let mut loss = 0.0;
    let mut delta: Vec<f64> = out
        .iter()
        .zip(target)
        .zip(out_scale)
        .map(|((o, t), c)| {
            let e = (o - t) * c;
            loss += e * e;
            2.0 * e * c * weight
        })
        .collect();
    for l in (0..net.layers.len()).rev() {
        let layer = &net.layers[l];
        let a_out = &acts[l + 1];
        for (d, a) in delta.iter_mut().zip(a_out) {
            *d *= layer.activation.derivative_from_output(*a);
        }
        let a_in = &acts[l];
        let gw = &mut grads.w[l];
        for i in 0..layer.rows {
            let d = delta[i];
            if d == 0.0 {
                continue;
            }
            let row = &mut gw[i * layer.cols..(i + 1) * layer.cols];
            for (g, a) in row.iter_mut().zip(a_in) {
                *g += d * a;
            }
            grads.b[l][i] += d;
        }
        if l > 0 {
            let mut prev = vec![0.0; layer.cols];
            for i in 0..layer.rows {
                let d = delta[i];
                let row = &layer.w[i * layer.cols..(i + 1) * layer.cols];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            delta = prev;
        }
    }
    loss
}

struct Adam {
    m: Grads,
    v: Grads,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &FeedforwardNet) -> Self {
        Self {
            m: Grads::zeros_like(net),
            v: Grads::zeros_like(net),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut FeedforwardNet, g: &Grads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let params = layer.w.iter_mut().zip(&g.w[l]).zip(self.m.w[l].iter_mut().zip(self.v.w[l].iter_mut()));
            let biases = layer.b.iter_mut().zip(&g.b[l]).zip(self.m.b[l].iter_mut().zip(self.v.b[l].iter_mut()));
            for ((p, &gr), (m, v)) in params.chain(biases) {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * gr;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * gr * gr;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Normalized training data shared by every trial.
struct Prepared {
    train_in: Vec<Vec<f64>>,
    train_out: Vec<Vec<f64>>,
    val_in: Vec<Vec<f64>>,
    val_out: Vec<Vec<f64>>,
    input_norm: Normalization,
    output_norm: Normalization,
}

fn rmse_normalized(net: &FeedforwardNet, inputs: &[Vec<f64>], targets: &[Vec<f64>], out_scale: &[f64]) -> f64 {
    let mut acts = Vec::new();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, t) in inputs.iter().zip(targets) {
        let mut a = x.clone();
        for layer in &net.layers {
            layer.forward_into(&a, &mut acts);
            std::mem::swap(&mut a, &mut acts);
        }
        for ((o, t), c) in a.iter().zip(t).zip(out_scale) {
            sum += ((o - t) * c).powi(2);
        }
        count += t.len();
    }
    (sum / count.max(1) as f64).sqrt()
}

struct TrialResult {
    net: FeedforwardNet,
    validation_rmse: f64,
    epochs: usize,
    history: Vec<f64>,
}

fn run_trial(data: &Prepared, hidden: &[usize], opts: &TrainOptions, rng: &mut ChaCha8Rng) -> Option<TrialResult> {
    let n_in = data.input_norm.len();
    let n_out = data.output_norm.len();
    let out_scale = &data.output_norm.scale;
    let mut net = FeedforwardNet::random(n_in, hidden, n_out, rng);
    let mut adam = Adam::new(&net);
    let mut grads = Grads::zeros_like(&net);
    let mut acts = Vec::new();
    let mut order: Vec<usize> = (0..data.train_in.len()).collect();
    let batch = opts.batch_size.max(1);
    let (check_in, check_out) = if data.val_in.is_empty() {
        (&data.train_in, &data.train_out)
    } else {
        (&data.val_in, &data.val_out)
    };

    let mut best = (f64::INFINITY, net.clone());
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut epochs = 0;
    for _ in 0..opts.max_epochs {
        epochs += 1;
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            grads.clear();
            let weight = 1.0 / (chunk.len() * n_out) as f64;
            let mut loss = 0.0;
            for &k in chunk {
                loss += backprop_sample(&net, &data.train_in[k], &data.train_out[k], out_scale, weight, &mut acts, &mut grads);
            }
            if !loss.is_finite() {
                return None;
            }
            adam.step(&mut net, &grads, opts.learning_rate);
        }
        let val = rmse_normalized(&net, check_in, check_out, out_scale);
        if !val.is_finite() {
            return None;
        }
        if val < best.0 {
            best = (val, net.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(best.0);
        if since_best >= opts.patience {
            break;
        }
    }
    let (validation_rmse, mut net) = best;
    net.normalization = data.input_norm.clone();
    net.output_normalization = Some(data.output_norm.clone());
    Some(TrialResult {
        net,
        validation_rmse,
        epochs,
        history,
    })
}

/// Train every architecture `trials` times from seeded random
/// initializations and keep the network with the lowest validation RMSE.
pub fn train(dataset: &TrainingDataset, opts: &TrainOptions) -> Result<(FeedforwardNet, TrainReport)> {
    if dataset.is_empty() {
        return Err(GovernError::contract("training needs a nonempty dataset"));
    }
    if opts.hidden_sizes.is_empty() || opts.trials == 0 {
        return Err(GovernError::contract("training needs at least one architecture and one trial"));
    }
    if !(0.0..1.0).contains(&opts.validation_fraction) {
        return Err(GovernError::contract("validation fraction must lie in [0, 1)"));
    }

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let n_val = if dataset.len() > 1 {
        ((dataset.len() as f64 * opts.validation_fraction).round() as usize).min(dataset.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let records = dataset.records();
    let raw_in = |idx: &[usize]| idx.iter().map(|&k| records[k].input()).collect::<Vec<_>>();
    let raw_out = |idx: &[usize]| idx.iter().map(|&k| records[k].commands.as_slice().to_vec()).collect::<Vec<_>>();
    let (train_in, train_out) = (raw_in(train_idx), raw_out(train_idx));
    let input_norm = Normalization::fit(&train_in);
    let output_norm = Normalization::fit(&train_out);
    let data = Prepared {
        train_in: train_in.iter().map(|x| input_norm.normalize(x)).collect(),
        train_out: train_out.iter().map(|y| output_norm.normalize(y)).collect(),
        val_in: raw_in(val_idx).iter().map(|x| input_norm.normalize(x)).collect(),
        val_out: raw_out(val_idx).iter().map(|y| output_norm.normalize(y)).collect(),
        input_norm,
        output_norm,
    };

    let jobs: Vec<(usize, usize)> = (0..opts.hidden_sizes.len())
        .flat_map(|a| (0..opts.trials).map(move |t| (a, t)))
        .collect();
    let results: Vec<Option<TrialResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(a, t)| {
                let data = &data;
                scope.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                    rng.set_stream((a * opts.trials + t + 1) as u64);
                    run_trial(data, &opts.hidden_sizes[a], opts, &mut rng)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });

    let mut summaries = Vec::with_capacity(jobs.len());
    let mut best: Option<(usize, TrialResult)> = None;
    for (&(a, t), res) in jobs.iter().zip(results) {
        let hidden = opts.hidden_sizes[a].clone();
        match res {
            None => {
                log::warn!("training trial {t} of architecture {hidden:?} diverged; discarded");
                summaries.push(TrialSummary {
                    hidden_sizes: hidden,
                    trial: t,
                    validation_rmse: None,
                    epochs: 0,
                });
            }
            Some(r) => {
                log::info!(
                    "architecture {hidden:?} trial {t}: validation rmse {:.6} after {} epochs",
                    r.validation_rmse,
                    r.epochs
                );
                summaries.push(TrialSummary {
                    hidden_sizes: hidden,
                    trial: t,
                    validation_rmse: Some(r.validation_rmse),
                    epochs: r.epochs,
                });
                if best.as_ref().is_none_or(|(_, b)| r.validation_rmse < b.validation_rmse) {
                    best = Some((a, r));
                }
            }
        }
    }
    let Some((a, best)) = best else {
        return Err(GovernError::Training(format!(
            "all {} trials diverged",
            summaries.len()
        )));
    };
    let final_rmse = rmse(&best.net, dataset)?;
    let report = TrainReport {
        final_rmse,
        validation_rmse: best.validation_rmse,
        epochs: best.epochs,
        train_size: data.train_in.len(),
        validation_size: data.val_in.len(),
        seed: opts.seed,
        hidden_sizes: opts.hidden_sizes[a].clone(),
        checkpoint_history: best.history,
        trials: summaries,
    };
    Ok((best.net, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net() -> FeedforwardNet {
        // 1-2-1: hidden = tanh([0.5; -1] x + [0.1; 0.2]), out = [2, 3] h - 0.5
        FeedforwardNet {
            input_dim: 1,
            output_dim: 1,
            normalization: Normalization::identity(1),
            output_normalization: None,
            layers: vec![
                Layer {
                    rows: 2,
                    cols: 1,
                    w: vec![0.5, -1.0],
                    b: vec![0.1, 0.2],
                    activation: Activation::Tanh,
                },
                Layer {
                    rows: 1,
                    cols: 2,
                    w: vec![2.0, 3.0],
                    b: vec![-0.5],
                    activation: Activation::Linear,
                },
            ],
        }
    }

    #[test]
    fn hand_written_file_matches_hand_computation() {
        let text = r#"{
            "input_dim": 1, "output_dim": 1,
            "normalization": {"shift": [0.0], "scale": [1.0]},
            "layers": [
                {"rows": 2, "cols": 1, "W": [0.5, -1.0], "b": [0.1, 0.2], "activation": "tanh"},
                {"rows": 1, "cols": 2, "W": [2.0, 3.0], "b": [-0.5], "activation": "linear"}
            ]
        }"#;
        let net = net_from_json(text, "inline").unwrap();
        assert_eq!(net, tiny_net());
        for x in [-2.0, 0.0, 0.7, 3.0] {
            let expected = 2.0 * (0.5 * x + 0.1f64).tanh() + 3.0 * (-x + 0.2f64).tanh() - 0.5;
            assert_close!(net.forward(&[x])[0], expected, 1e-15);
        }
    }

    #[test]
    fn missing_field_is_named() {
        let text = r#"{"input_dim": 1, "output_dim": 1, "normalization": {"shift": [0.0], "scale": [1.0]}}"#;
        let err = net_from_json(text, "net.json").unwrap_err().to_string();
        assert!(err.contains("layers") && err.contains("net.json"), "{err}");
    }

    #[test]
    fn broken_chain_is_rejected() {
        let mut net = tiny_net();
        net.layers[1].cols = 3;
        net.layers[1].w.push(1.0);
        assert!(net.validate().is_err());
        let mut net = tiny_net();
        net.layers[1].activation = Activation::Tanh;
        assert!(net.validate().is_err());
    }

    #[test]
    fn zero_weights_give_the_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = FeedforwardNet::random(3, &[4], 3, &mut rng);
        net.scale_weights(0.0);
        net.layers[1].b = vec![0.3, -1.0, 2.0];
        for x in [[0.0, 0.0], [5.0, -3.0]] {
            let out = infer(&net, &StateVector::from_column_slice(&x), 1.7).unwrap();
            assert_eq!(out.as_slice(), &[0.3, -1.0, 2.0]);
        }
    }

    #[test]
    fn save_load_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = FeedforwardNet::random(3, &[7], 4, &mut rng);
        net.normalization = Normalization {
            shift: vec![0.1, -1.0 / 3.0, 2.0],
            scale: vec![0.7, 1.1, std::f64::consts::PI],
        };
        net.output_normalization = Some(Normalization {
            shift: vec![1.0 / 7.0; 4],
            scale: vec![0.3; 4],
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save_net(&net, &path).unwrap();
        let back = load_net(&path).unwrap();
        assert_eq!(back, net);
        let x = StateVector::from_column_slice(&[0.123, -0.456]);
        let a = infer(&net, &x, 1.5).unwrap();
        let b = infer(&back, &x, 1.5).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    fn dataset(labels: impl Fn(f64, f64, f64) -> Vec<f64>, n: usize) -> TrainingDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let records = (0..n)
            .map(|_| {
                let x = StateVector::from_column_slice(&[rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0)]);
                let r = rng.random_range(-3.0..3.0);
                let v = labels(x[0], x[1], r);
                Record {
                    x,
                    r,
                    commands: CommandSequence::new(v).unwrap(),
                }
            })
            .collect();
        TrainingDataset::new(2, 2, records).unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = dataset(|a, b, r| vec![a / 3.0, b * r, r.sin()], 20);
        let back = TrainingDataset::from_csv(&ds.to_csv(), "mem").unwrap();
        assert_eq!(back, ds);
        assert!(ds.to_csv().starts_with("x0,x1,r,v0,v1,v2\n"));
    }

    #[test]
    fn csv_errors_carry_line_and_field() {
        let text = "x0,r,v0,v1\n1.0,2.0,3.0,4.0\n1.0,abc,3.0,4.0\n";
        let err = TrainingDataset::from_csv(text, "d.csv").unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("field r"), "{err}");
    }

    #[test]
    fn rmse_of_offset_net_is_the_offset() {
        let ds = dataset(|a, b, r| vec![a, b, r], 30);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = FeedforwardNet::random(3, &[2], 3, &mut rng);
        net.scale_weights(0.0);
        // The net outputs the constant 0.25; build labels that sit 0.1 below it.
        net.layers[1].b = vec![0.25; 3];
        let shifted = TrainingDataset::new(
            2,
            2,
            ds.records()
                .iter()
                .map(|r| Record {
                    commands: CommandSequence::new(vec![0.15; 3]).unwrap(),
                    ..r.clone()
                })
                .collect(),
        )
        .unwrap();
        assert_close!(rmse(&net, &shifted).unwrap(), 0.1, 1e-15);
    }

    #[test]
    fn rmse_matches_two_pass_oracle() {
        let ds = dataset(|a, b, r| vec![a * b, r - a, b.cos()], 50);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = FeedforwardNet::random(3, &[6], 3, &mut rng);
        // first pass: per-record squared errors; second pass: reverse-order sum
        let per_record: Vec<f64> = ds
            .records()
            .iter()
            .map(|rec| {
                let out = infer(&net, &rec.x, rec.r).unwrap();
                out.as_slice().iter().zip(rec.commands.as_slice()).map(|(o, t)| (o - t) * (o - t)).sum()
            })
            .collect();
        let total: f64 = per_record.iter().rev().sum();
        let oracle = (total / (3 * ds.len()) as f64).sqrt();
        assert_close!(rmse(&net, &ds).unwrap(), oracle, 1e-12);
    }

    #[test]
    fn normalization_inverts() {
        let n = Normalization {
            shift: vec![1.5, -2.0, 1e3],
            scale: vec![0.3, 7.0, 250.0],
        };
        let z = [0.1, 42.0, -1234.5];
        let back = n.denormalize(&n.normalize(&z));
        for (a, b) in back.iter().zip(z) {
            assert_close!(*a, b, 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = FeedforwardNet::random(3, &[4, 3], 2, &mut rng);
        let inputs: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let targets: Vec<Vec<f64>> = (0..5).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let scale = [1.5, 0.5];
        let loss = |net: &FeedforwardNet| {
            let mut g = Grads::zeros_like(net);
            let mut acts = Vec::new();
            inputs
                .iter()
                .zip(&targets)
                .map(|(x, t)| backprop_sample(net, x, t, &scale, 1.0, &mut acts, &mut g))
                .sum::<f64>()
        };
        let mut grads = Grads::zeros_like(&net);
        let mut acts = Vec::new();
        for (x, t) in inputs.iter().zip(&targets) {
            backprop_sample(&net, x, t, &scale, 1.0, &mut acts, &mut grads);
        }
        let h = 1e-6;
        for l in 0..net.layers.len() {
            for k in 0..net.layers[l].w.len() + net.layers[l].b.len() {
                let perturb = |delta: f64| {
                    let mut p = net.clone();
                    let nw = p.layers[l].w.len();
                    if k < nw {
                        p.layers[l].w[k] += delta;
                    } else {
                        p.layers[l].b[k - nw] += delta;
                    }
                    loss(&p)
                };
                let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                let nw = net.layers[l].w.len();
                let bp = if k < nw { grads.w[l][k] } else { grads.b[l][k - nw] };
                assert!((fd - bp).abs() <= 1e-4 * fd.abs().max(1e-3), "layer {l} param {k}: fd {fd} bp {bp}");
            }
        }
    }

    fn quick_opts() -> TrainOptions {
        TrainOptions {
            hidden_sizes: vec![vec![4]],
            trials: 2,
            seed: 7,
            max_epochs: 300,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn constant_map_is_learned() {
        let ds = dataset(|_, _, _| vec![1.25, 1.25, 1.25], 200);
        let opts = TrainOptions {
            max_epochs: TrainOptions::default().max_epochs,
            ..quick_opts()
        };
        let (net, report) = train(&ds, &opts).unwrap();
        assert!(report.final_rmse <= 1e-3, "{}", report.final_rmse);
        assert_close!(rmse(&net, &ds).unwrap(), report.final_rmse, 1e-15);
    }

    #[test]
    fn seeded_training_is_reproducible_and_checkpoints_improve() {
        let ds = dataset(|a, b, r| vec![(a + r).tanh(), b * 0.3, r], 150);
        let (n1, r1) = train(&ds, &quick_opts()).unwrap();
        let (n2, r2) = train(&ds, &quick_opts()).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(n1, n2);
        assert!(r1.checkpoint_history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(r1.train_size + r1.validation_size, 150);
        assert_eq!(r1.validation_size, 23);
    }

    #[test]
    fn infer_is_pure_and_checks_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = FeedforwardNet::random(3, &[5], 4, &mut rng);
        let x = StateVector::from_column_slice(&[0.2, -0.1]);
        assert_eq!(infer(&net, &x, 0.5).unwrap(), infer(&net, &x, 0.5).unwrap());
        assert!(infer(&net, &StateVector::zeros(3), 0.5).is_err());
    }
}
