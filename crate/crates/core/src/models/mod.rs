//! The frozen classifier, its temperature branch, and the combined calibrated model.
//!
//! The classifier's logits are the log-location of the Concrete distribution. The
//! branch reads the classifier's hidden features at `cut_index` and maps them to a
//! positive temperature through softplus.

mod checkpoint;

use serde::{Deserialize, Serialize};

pub use checkpoint::{write_atomic, Calibration, Checkpoint, CHECKPOINT_FORMAT};

use crate::distributions::{argmax, ConcreteParams, ProbVector};
use crate::error::{Error, Result};
use crate::numcore::special::{softmax_into, softplus_raw};
use crate::numcore::{GradTape, Rng, Tensor, Var};

/// Default lower bound on the temperature.
pub const DEFAULT_MIN_TEMPERATURE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, t: &mut Tensor) {
        if self == Activation::Relu {
            for v in t.data_mut() {
                *v = v.max(0.0);
            }
        }
    }

    fn record(self, tape: &mut GradTape, v: Var) -> Var {
        match self {
            Activation::Identity => v,
            Activation::Relu => tape.relu(v),
        }
    }
}

/// Fully connected layer; `weights` is `[in, out]`, `bias` is `[1, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Dense {
    /// Uniform(−s, s) weights and biases with `s = 1/√fan_in`.
    pub fn init(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut Rng) -> Self {
        let s = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.uniform_range(-s, s)).collect();
        let b = (0..fan_out).map(|_| rng.uniform_range(-s, s)).collect();
        Dense {
            weights: Tensor::from_parts(fan_in, fan_out, w),
            bias: Tensor::from_parts(1, fan_out, b),
            activation,
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Dense {
            weights: Tensor::zeros(fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    fn validate(&self) -> Result<()> {
        if self.weights.shape().len() != 2 || self.bias.rows() != 1 || self.bias.cols() != self.output_dim() {
            return Err(Error::arg(format!(
                "layer with weights {:?} and bias {:?}",
                self.weights.shape(),
                self.bias.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let n = x.rows();
        let mut out = Tensor::from_parts(n, self.output_dim(), self.bias.data().repeat(n));
        crate::numcore::gemm(x, false, &self.weights, false, &mut out, 1.0);
        self.activation.apply(&mut out);
        out
    }

    /// Records this layer; returns the output and, when `track`, the `(w, b)` leaves.
    pub(crate) fn record(&self, tape: &mut GradTape, x: Var, track: bool) -> (Var, Option<(Var, Var)>) {
        let (w, b) = if track {
            (tape.leaf(self.weights.clone()), tape.leaf(self.bias.clone()))
        } else {
            (tape.constant(self.weights.clone()), tape.constant(self.bias.clone()))
        };
        let y = tape.affine(x, w, b);
        (self.activation.record(tape, y), track.then_some((w, b)))
    }
}

fn validate_chain(layers: &[Dense]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::arg("network needs at least one layer"));
    }
    for l in layers {
        l.validate()?;
    }
    for pair in layers.windows(2) {
        if pair[0].output_dim() != pair[1].input_dim() {
            return Err(Error::arg(format!(
                "layer output {} feeds layer input {}",
                pair[0].output_dim(),
                pair[1].input_dim()
            )));
        }
    }
    Ok(())
}

fn check_input(x: &Tensor, dim: usize) -> Result<()> {
    if x.cols() != dim {
        return Err(Error::arg(format!("expected input width {dim}, got {:?}", x.shape())));
    }
    Ok(())
}

/// Feed-forward classifier with a designated feature cut.
///
/// `layers[..cut_index]` is the feature extractor, `layers[cut_index..]` the head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMlp", into = "RawMlp")]
pub struct MlpModel {
    layers: Vec<Dense>,
    cut_index: usize,
}

#[derive(Serialize, Deserialize)]
struct RawMlp {
    layers: Vec<Dense>,
    cut_index: usize,
}

impl TryFrom<RawMlp> for MlpModel {
    type Error = Error;
    fn try_from(raw: RawMlp) -> Result<Self> {
        MlpModel::new(raw.layers, raw.cut_index)
    }
}

impl From<MlpModel> for RawMlp {
    fn from(m: MlpModel) -> Self {
        RawMlp {
            layers: m.layers,
            cut_index: m.cut_index,
        }
    }
}

impl MlpModel {
    pub fn new(layers: Vec<Dense>, cut_index: usize) -> Result<Self> {
        validate_chain(&layers)?;
        if cut_index == 0 || cut_index >= layers.len() {
            return Err(Error::arg(format!(
                "cut index {cut_index} must lie strictly inside {} layer(s)",
                layers.len()
            )));
        }
        if layers.last().map(Dense::output_dim).unwrap_or(0) < 2 {
            return Err(Error::arg("classifier needs at least two outputs"));
        }
        Ok(MlpModel { layers, cut_index })
    }

    /// ReLU hidden layers of the given widths, then a linear layer of `classes` logits.
    pub fn init(input_dim: usize, hidden: &[usize], classes: usize, cut_index: usize, rng: &mut Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for &h in hidden {
            layers.push(Dense::init(fan_in, h, Activation::Relu, rng));
            fan_in = h;
        }
        layers.push(Dense::init(fan_in, classes, Activation::Identity, rng));
        MlpModel::new(layers, cut_index)
    }

    /// Hidden widths (64, 64), cut after the second hidden layer.
    pub fn default_classifier(input_dim: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        MlpModel::init(input_dim, &[64, 64], classes, 2, rng)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn cut_index(&self) -> usize {
        self.cut_index
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("validated non-empty").output_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.cut_index - 1].output_dim()
    }

    /// Trainable tensors in recording order: `w0, b0, w1, b1, ...`.
    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    /// Logits `ĝ(x)` for each row of `x`. These are `ln α`.
    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.head(&self.forward_features(x)?))
    }

    /// Hidden activations `f̂(x)` at the cut.
    pub fn forward_features(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.input_dim())?;
        let mut h = self.layers[0].forward(x);
        for l in &self.layers[1..self.cut_index] {
            h = l.forward(&h);
        }
        Ok(h)
    }

    /// Classification head applied to features.
    pub fn head(&self, features: &Tensor) -> Tensor {
        let mut h = self.layers[self.cut_index].forward(features);
        for l in &self.layers[self.cut_index + 1..] {
            h = l.forward(&h);
        }
        h
    }

    /// Records the full network with every parameter tracked.
    pub(crate) fn record(&self, tape: &mut GradTape, x: Var) -> (Var, Vec<Var>) {
        let mut h = x;
        let mut params = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            let (y, p) = l.record(tape, h, true);
            let (w, b) = p.expect("tracked");
            params.extend([w, b]);
            h = y;
        }
        (h, params)
    }
}

/// Scalar network `h` on classifier features; the temperature is `softplus(h)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Dense>", into = "Vec<Dense>")]
pub struct TemperatureBranch {
    layers: Vec<Dense>,
}

impl TryFrom<Vec<Dense>> for TemperatureBranch {
    type Error = Error;
    fn try_from(layers: Vec<Dense>) -> Result<Self> {
        TemperatureBranch::new(layers)
    }
}

impl From<TemperatureBranch> for Vec<Dense> {
    fn from(b: TemperatureBranch) -> Self {
        b.layers
    }
}

impl TemperatureBranch {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        validate_chain(&layers)?;
        let last = layers.last().expect("validated non-empty");
        if last.output_dim() != 1 || last.activation != Activation::Identity {
            return Err(Error::arg("temperature branch must end in one linear output"));
        }
        Ok(TemperatureBranch { layers })
    }

    pub fn init(feature_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = feature_dim;
        for &h in hidden {
            layers.push(Dense::init(fan_in, h, Activation::Relu, rng));
            fan_in = h;
        }
        layers.push(Dense::init(fan_in, 1, Activation::Identity, rng));
        TemperatureBranch::new(layers)
    }

    /// Hidden widths (128, 64).
    pub fn default_branch(feature_dim: usize, rng: &mut Rng) -> Result<Self> {
        TemperatureBranch::init(feature_dim, &[128, 64], rng)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    /// Raw pre-softplus output `h(z)`, one value per row.
    pub fn forward_raw(&self, features: &Tensor) -> Vec<f64> {
        let mut h = self.layers[0].forward(features);
        for l in &self.layers[1..] {
            h = l.forward(&h);
        }
        h.into_data()
    }

    /// Records `max(softplus(h(z)), floor)` as a `[n, 1]` column with tracked parameters.
    pub(crate) fn record_temperature(&self, tape: &mut GradTape, features: Var, floor: f64) -> (Var, Vec<Var>) {
        let mut h = features;
        let mut params = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            let (y, p) = l.record(tape, h, true);
            let (w, b) = p.expect("tracked");
            params.extend([w, b]);
            h = y;
        }
        let t = tape.softplus(h);
        (tape.clamp_min(t, floor), params)
    }
}

/// Frozen classifier plus trainable temperature branch.
#[derive(Clone, Debug, PartialEq)]
pub struct StsModel {
    classifier: MlpModel,
    branch: TemperatureBranch,
    min_temperature: f64,
}

impl StsModel {
    pub fn new(classifier: MlpModel, branch: TemperatureBranch, min_temperature: f64) -> Result<Self> {
        if branch.input_dim() != classifier.feature_dim() {
            return Err(Error::arg(format!(
                "branch reads {} features, classifier cut produces {}",
                branch.input_dim(),
                classifier.feature_dim()
            )));
        }
        if !(min_temperature > 0.0) {
            return Err(Error::domain("minimum temperature must be positive"));
        }
        Ok(StsModel {
            classifier,
            branch,
            min_temperature,
        })
    }

    /// Attaches a freshly initialized default branch to `classifier`.
    pub fn with_default_branch(classifier: MlpModel, rng: &mut Rng) -> Result<Self> {
        let branch = TemperatureBranch::default_branch(classifier.feature_dim(), rng)?;
        StsModel::new(classifier, branch, DEFAULT_MIN_TEMPERATURE)
    }

    pub fn classifier(&self) -> &MlpModel {
        &self.classifier
    }

    pub fn branch(&self) -> &TemperatureBranch {
        &self.branch
    }

    pub(crate) fn branch_mut(&mut self) -> &mut TemperatureBranch {
        &mut self.branch
    }

    pub fn min_temperature(&self) -> f64 {
        self.min_temperature
    }

    pub fn into_parts(self) -> (MlpModel, TemperatureBranch, f64) {
        (self.classifier, self.branch, self.min_temperature)
    }

    pub fn temperatures_from_features(&self, features: &Tensor) -> Vec<f64> {
        self.branch
            .forward_raw(features)
            .into_iter()
            .map(|h| softplus_raw(h).max(self.min_temperature))
            .collect()
    }

    /// `λ(x)` for every row of `x`.
    pub fn temperature(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.temperatures_from_features(&self.classifier.forward_features(x)?))
    }

    /// Logits and temperatures from one pass through the shared feature extractor.
    pub fn logits_and_temperatures(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let features = self.classifier.forward_features(x)?;
        let logits = self.classifier.head(&features);
        Ok((logits, self.temperatures_from_features(&features)))
    }

    pub fn concrete_params(&self, x: &Tensor) -> Result<Vec<ConcreteParams>> {
        let (logits, temps) = self.logits_and_temperatures(x)?;
        logits
            .row_iter()
            .zip(temps)
            .map(|(row, t)| ConcreteParams::new(row.to_vec(), t))
            .collect()
    }

    /// `p(y | x) = softmax(ĝ(x))`. Reads only the classifier.
    pub fn predictive_distribution(&self, x: &Tensor) -> Result<Vec<ProbVector>> {
        predictive_from_logits(&self.classifier.forward_logits(x)?)
    }

    /// Argmax of the logits, lowest index on ties.
    pub fn predict_class(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(predict_from_logits(&self.classifier.forward_logits(x)?))
    }
}

pub fn predictive_from_logits(logits: &Tensor) -> Result<Vec<ProbVector>> {
    logits
        .row_iter()
        .map(|row| {
            let mut p = vec![0.0; row.len()];
            softmax_into(row, &mut p);
            ProbVector::new(p)
        })
        .collect()
}

pub fn predict_from_logits(logits: &Tensor) -> Vec<usize> {
    logits.row_iter().map(argmax).collect()
}
