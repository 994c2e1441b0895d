use super::losses::{cross_entropy_tape, dirichlet_ts_tape, log_label_matrix, one_hot, scaled_nll, sts_nll_tape};
use super::{is_divergent, snapshot_id, Optimizer, TrainConfig, TrainTrace};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::mixup::{multi_mixup_step, MixupConfig, StratifiedSampler};
use crate::models::{MlpModel, StsModel};
use crate::distributions::ProbVector;
use crate::numcore::{GradTape, Rng, Tensor, Var};

fn model_snapshot(model: &MlpModel) -> String {
    snapshot_id(model.layers().iter().flat_map(|l| [&l.weights, &l.bias]))
}

fn branch_snapshot(model: &StsModel) -> String {
    snapshot_id(model.branch().layers().iter().flat_map(|l| [&l.weights, &l.bias]))
}

/// Minibatch cross-entropy training of every classifier parameter.
///
/// A run diverges when an epoch's mean loss is non-finite or exceeds the threshold.
/// On divergence the parameters of the best completed epoch (or the initial ones
/// when none completed) are restored and the trace is flagged.
pub fn pretrain(model: &mut MlpModel, dataset: &LabeledDataset, config: &TrainConfig) -> Result<TrainTrace> {
    config.validate()?;
    if dataset.dim() != model.input_dim() || dataset.class_count() != model.output_dim() {
        return Err(Error::arg("dataset does not match the classifier's input or output width"));
    }
    let mut rng = Rng::new(config.seed);
    let mut opt = Optimizer::new(config);
    let mut tape = GradTape::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = TrainTrace::default();
    let mut best: Option<(f64, MlpModel)> = None;
    let initial = model.clone();
    let k = model.output_dim();

    'epochs: for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let x = dataset.inputs().select_rows(chunk);
            let ys: Vec<usize> = chunk.iter().map(|&i| dataset.labels()[i]).collect();
            tape.clear();
            let xv = tape.constant(x);
            let (logits, params) = model.record(&mut tape, xv);
            let loss = cross_entropy_tape(&mut tape, logits, &one_hot(&ys, k));
            let value = tape.value(loss).item();
            if !value.is_finite() {
                trace.epoch_losses.push(value);
                trace.diverged = true;
                break 'epochs;
            }
            total += value * chunk.len() as f64;
            let grads = tape.grad(loss, &params)?;
            opt.step(model.params_mut(), &grads, lr);
        }
        let mean = total / dataset.len() as f64;
        trace.epoch_losses.push(mean);
        if is_divergent(mean) {
            trace.diverged = true;
            break;
        }
        if best.as_ref().is_none_or(|(b, _)| mean < *b) {
            best = Some((mean, model.clone()));
        }
    }
    if trace.diverged {
        *model = best.map_or(initial, |(_, m)| m);
    }
    trace.snapshot_id = model_snapshot(model);
    Ok(trace)
}

/// Which likelihood the temperature branch is fitted under.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchObjective {
    /// Concrete negative log-likelihood, output read as λ.
    Concrete,
    /// Temperature-annealed Dirichlet negative log-likelihood, output read as `t`.
    Dirichlet,
}

/// Mean cross-entropy of `model` on a labeled batch and its gradient with respect
/// to every classifier parameter, ordered `w0, b0, w1, b1, ...`.
pub fn classifier_loss_and_gradient(model: &MlpModel, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    if x.rows() != labels.len() {
        return Err(Error::arg("one label per input row is required"));
    }
    model.forward_features(x)?;
    let mut tape = GradTape::new();
    let xv = tape.constant(x.clone());
    let (logits, params) = model.record(&mut tape, xv);
    let loss = cross_entropy_tape(&mut tape, logits, &one_hot(labels, model.output_dim()));
    let grads = tape.grad(loss, &params)?;
    Ok((tape.value(loss).item(), grads))
}

/// Branch loss on simplex-labeled inputs and its gradient with respect to every
/// branch parameter, ordered `w0, b0, w1, b1, ...`. The classifier is held fixed.
pub fn branch_loss_and_gradient(
    model: &StsModel,
    x: &Tensor,
    labels: &[ProbVector],
    objective: BranchObjective,
) -> Result<(f64, Vec<Tensor>)> {
    if x.rows() != labels.len() {
        return Err(Error::arg("one label per input row is required"));
    }
    let features = model.classifier().forward_features(x)?;
    let logits = model.classifier().head(&features);
    let mut tape = GradTape::new();
    let (loss, params) = record_branch_loss(&mut tape, model, features, &logits, &log_label_matrix(labels), objective);
    let grads = tape.grad(loss, &params)?;
    Ok((tape.value(loss).item(), grads))
}

fn record_branch_loss(
    tape: &mut GradTape,
    model: &StsModel,
    features: Tensor,
    logits: &Tensor,
    log_labels: &Tensor,
    objective: BranchObjective,
) -> (Var, Vec<Var>) {
    let f = tape.constant(features);
    let (t, params) = model.branch().record_temperature(tape, f, model.min_temperature());
    let loss = match objective {
        BranchObjective::Concrete => sts_nll_tape(tape, logits, log_labels, t),
        BranchObjective::Dirichlet => dirichlet_ts_tape(tape, logits, log_labels, t),
    };
    (loss, params)
}

/// Trains the temperature branch on fresh Multi-Mixup batches. One epoch is
/// `ceil(N / (r · s))` steps, so it synthesizes about as many pairs as `dataset` holds.
fn train_branch(
    model: &mut StsModel,
    dataset: &LabeledDataset,
    mixup: &MixupConfig,
    config: &TrainConfig,
    objective: BranchObjective,
) -> Result<TrainTrace> {
    config.validate()?;
    mixup.validate(dataset.class_count())?;
    let classifier = model.classifier();
    if dataset.dim() != classifier.input_dim() || dataset.class_count() != classifier.output_dim() {
        return Err(Error::arg("dataset does not match the classifier's input or output width"));
    }
    let sampler = StratifiedSampler::new(dataset)?;
    let steps = dataset.len().div_ceil(mixup.batch_size());
    let mut rng = Rng::new(config.seed);
    let mut opt = Optimizer::new(config);
    let mut tape = GradTape::new();
    let mut trace = TrainTrace::default();
    let initial = model.branch().clone();

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        let mut total = 0.0;
        for _ in 0..steps {
            let buckets = sampler.sample(mixup.r, &mut rng)?;
            let batch = multi_mixup_step(&buckets, mixup, &mut rng)?;
            // the classifier is evaluated outside the tape, so it can never receive gradients
            let features = model.classifier().forward_features(&batch.inputs)?;
            let logits = model.classifier().head(&features);
            let log_labels = log_label_matrix(&batch.labels);
            tape.clear();
            let (loss, params) = record_branch_loss(&mut tape, model, features, &logits, &log_labels, objective);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                total = value;
                break;
            }
            total += value;
            let grads = tape.grad(loss, &params)?;
            opt.step(model.branch_mut().params_mut(), &grads, lr);
        }
        let mean = total / steps as f64;
        trace.epoch_losses.push(mean);
        if is_divergent(mean) {
            trace.diverged = true;
            *model.branch_mut() = initial;
            trace.snapshot_id = branch_snapshot(model);
            return Err(Error::Calibration { trace: Box::new(trace) });
        }
    }
    trace.snapshot_id = branch_snapshot(model);
    Ok(trace)
}

/// Fits the temperature branch by minimizing the Concrete negative log-likelihood
/// of Multi-Mixup labels. Only branch parameters change.
pub fn calibrate_sts(model: &mut StsModel, dataset: &LabeledDataset, mixup: &MixupConfig, config: &TrainConfig) -> Result<TrainTrace> {
    train_branch(model, dataset, mixup, config, BranchObjective::Concrete)
}

/// The Dirichlet baseline: the branch output scales the logits inside
/// `exp(ĝ / t)`, trained on the same synthetic pairs.
pub fn calibrate_dirichlet_ts(
    model: &mut StsModel,
    dataset: &LabeledDataset,
    mixup: &MixupConfig,
    config: &TrainConfig,
) -> Result<TrainTrace> {
    train_branch(model, dataset, mixup, config, BranchObjective::Dirichlet)
}

/// Search interval and tolerance for the single-temperature baseline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarTsSearch {
    pub lo: f64,
    pub hi: f64,
    pub tol: f64,
}

impl Default for ScalarTsSearch {
    fn default() -> Self {
        ScalarTsSearch {
            lo: 0.05,
            hi: 20.0,
            tol: 1e-7,
        }
    }
}

/// Golden-section minimization of `NLL(softmax(logits / T))` over `T`.
pub fn calibrate_scalar_ts(logits: &Tensor, labels: &[usize], search: ScalarTsSearch) -> Result<f64> {
    let f = |t: f64| scaled_nll(logits, labels, t);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (search.lo, search.hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > search.tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    Ok(0.5 * (a + b))
}
