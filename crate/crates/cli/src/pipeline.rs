//! Subcommand implementations. Each reads the config, does its stage for every
//! checkpoint or trial seed, and writes its artifacts under `output_dir`.

use std::path::{Path, PathBuf};

use sts_core::calibrate::{
    calibrate_dirichlet_ts, calibrate_scalar_ts, calibrate_sts, pretrain, ScalarTsSearch, TrainConfig, TrainTrace,
};
use sts_core::data::{load_task, LabeledDataset, TaskKind};
use sts_core::metrics::{
    auroc_aupr, dirichlet_ts_confidence, reliability_table, softmax_confidence, sts_confidence, uncertainty_scores,
};
use sts_core::mixup::{tune_beta, BetaSelection, MixupConfig};
use sts_core::models::{predict_from_logits, write_atomic, Calibration, Checkpoint, MlpModel, StsModel, TemperatureBranch};
use sts_core::numcore::{Rng, Tensor};

use crate::config::{ExperimentConfig, MixupSource};
use crate::error::{CliError, CliResult};
use crate::report::{CalibrationReport, DetectorScore, OodReport, OodRow, TrialRow, TuningReport, TuningRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Sts,
    ScalarTs,
    DirichletTs,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sts => "sts",
            Method::ScalarTs => "scalar-ts",
            Method::DirichletTs => "dirichlet-ts",
        }
    }
}

// Every random stream of a trial is a child of the trial seed, so stages can be
// rerun independently and still see the same randomness.
const STAGE_CLASSIFIER_INIT: u64 = 0;
const STAGE_PRETRAIN: u64 = 1;
const STAGE_BRANCH_INIT: u64 = 2;
const STAGE_CALIBRATE: u64 = 3;
const STAGE_TUNE: u64 = 4;
const STAGE_EVALUATE: u64 = 5;
const STAGE_OOD: u64 = 6;

fn stage_rng(trial: u64, stage: u64) -> Rng {
    Rng::new(trial).split(stage)
}

/// Optimizer seed for a stage; the section's own `seed` acts as a salt.
fn train_seed(trial: u64, stage: u64, config: &TrainConfig) -> u64 {
    stage_rng(trial, stage).split(config.seed).seed()
}

pub struct TaskSplits {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn load_splits(config: &ExperimentConfig) -> CliResult<TaskSplits> {
    let (train, validation, test) = load_task(&config.task)?;
    Ok(TaskSplits { train, validation, test })
}

pub fn trial_dir(config: &ExperimentConfig, trial: u64) -> PathBuf {
    config.output_dir.join(format!("trial-{trial}"))
}

pub fn pretrained_path(config: &ExperimentConfig, trial: u64) -> PathBuf {
    trial_dir(config, trial).join("pretrained.json")
}

pub fn calibrated_path(config: &ExperimentConfig, trial: u64, method: Method) -> PathBuf {
    trial_dir(config, trial).join(format!("{}.json", method.name()))
}

/// Pretrained checkpoint of every configured trial.
pub fn default_pretrained(config: &ExperimentConfig) -> Vec<PathBuf> {
    config.trial_seeds.iter().map(|&t| pretrained_path(config, t)).collect()
}

/// Every checkpoint present for the configured trials, pretrained first.
pub fn default_evaluation_set(config: &ExperimentConfig) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for &t in &config.trial_seeds {
        out.push(pretrained_path(config, t));
        for m in [Method::Sts, Method::ScalarTs, Method::DirichletTs] {
            let p = calibrated_path(config, t, m);
            if p.exists() {
                out.push(p);
            }
        }
    }
    out
}

fn load_checkpoint(path: &Path, data: &LabeledDataset) -> CliResult<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.class_count != data.class_count() || ck.input_dim != data.dim() {
        return Err(CliError::Usage(format!(
            "{} has {} classes over {} inputs but the task has {} classes over {}",
            path.display(),
            ck.class_count,
            ck.input_dim,
            data.class_count(),
            data.dim()
        )));
    }
    Ok(ck)
}

fn accuracy(pred: &[usize], labels: &[usize]) -> (f64, Vec<bool>) {
    let correct: Vec<bool> = pred.iter().zip(labels).map(|(a, b)| a == b).collect();
    let hits = correct.iter().filter(|c| **c).count();
    (hits as f64 / labels.len() as f64, correct)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub struct PretrainOutcome {
    pub trial_seed: u64,
    pub checkpoint: PathBuf,
    pub trace: TrainTrace,
}

/// Trains one classifier per trial seed; writes `pretrained.json` and `pretrain_loss.csv`.
pub fn cmd_pretrain(config: &ExperimentConfig) -> CliResult<Vec<PretrainOutcome>> {
    let task = load_splits(config)?;
    let mut out = Vec::new();
    for &trial in &config.trial_seeds {
        let mut init = stage_rng(trial, STAGE_CLASSIFIER_INIT);
        let mut classifier = MlpModel::init(
            task.train.dim(),
            &config.model.hidden,
            task.train.class_count(),
            config.model.cut_index,
            &mut init,
        )?;
        let tc = TrainConfig {
            seed: train_seed(trial, STAGE_PRETRAIN, &config.pretrain),
            ..config.pretrain.clone()
        };
        let trace = pretrain(&mut classifier, &task.train, &tc)?;
        write_atomic(&trial_dir(config, trial).join("pretrain_loss.csv"), trace.to_csv().as_bytes())?;
        if trace.diverged {
            return Err(CliError::Diverged(format!(
                "pretraining of trial {trial} diverged after {} epoch(s)",
                trace.epoch_losses.len()
            )));
        }
        let mut ck = Checkpoint::new(classifier, tc.seed, trial);
        ck.min_temperature = config.model.min_temperature;
        let path = pretrained_path(config, trial);
        ck.save(&path)?;
        out.push(PretrainOutcome {
            trial_seed: trial,
            checkpoint: path,
            trace,
        });
    }
    Ok(out)
}

pub struct CalibrateOutcome {
    pub trial_seed: u64,
    pub method: Method,
    pub checkpoint: PathBuf,
    pub beta: Option<f64>,
    pub temperature: Option<f64>,
    pub selection: Option<BetaSelection>,
    pub trace: Option<TrainTrace>,
}

struct BranchFit {
    model: StsModel,
    beta: f64,
    trace: TrainTrace,
    selection: Option<BetaSelection>,
}

fn branch_confidence(model: &StsModel, method: Method, x: &Tensor, p: usize, rng: &mut Rng) -> sts_core::Result<Vec<f64>> {
    match method {
        Method::DirichletTs => dirichlet_ts_confidence(model, x),
        _ => sts_confidence(model, x, p, rng),
    }
}

/// Fits the temperature branch, tuning β on validation ECE when a grid is configured.
fn fit_branch(config: &ExperimentConfig, ck: &Checkpoint, task: &TaskSplits, method: Method, tune: bool) -> CliResult<BranchFit> {
    let trial = ck.trial_seed;
    let source = match config.mixup_source {
        MixupSource::Validation => &task.validation,
        MixupSource::Train => &task.train,
    };
    let base = if method == Method::DirichletTs {
        &config.dirichlet
    } else {
        &config.calibration
    };
    let tc = TrainConfig {
        seed: train_seed(trial, STAGE_CALIBRATE, base),
        ..base.clone()
    };
    let fit = |beta: f64| -> sts_core::Result<(StsModel, TrainTrace)> {
        let branch = TemperatureBranch::init(
            ck.classifier.feature_dim(),
            &config.model.branch_hidden,
            &mut stage_rng(trial, STAGE_BRANCH_INIT),
        )?;
        let mut model = StsModel::new(ck.classifier.clone(), branch, ck.min_temperature)?;
        let mixup = MixupConfig {
            beta,
            ..config.mixup.clone()
        };
        let trace = match method {
            Method::DirichletTs => calibrate_dirichlet_ts(&mut model, source, &mixup, &tc)?,
            _ => calibrate_sts(&mut model, source, &mixup, &tc)?,
        };
        Ok((model, trace))
    };

    if !tune || config.beta_grid.is_empty() {
        let (model, trace) = fit(config.mixup.beta)?;
        return Ok(BranchFit {
            model,
            beta: config.mixup.beta,
            trace,
            selection: None,
        });
    }
    let val = &task.validation;
    let (_, val_correct) = accuracy(&predict_from_logits(&ck.classifier.forward_logits(val.inputs())?), val.labels());
    let mut fitted: Vec<(f64, StsModel, TrainTrace)> = Vec::new();
    let selection = tune_beta(&config.beta_grid, |beta| {
        let (model, trace) = fit(beta)?;
        let mut rng = stage_rng(trial, STAGE_TUNE);
        let conf = branch_confidence(&model, method, val.inputs(), config.metrics.confidence_samples, &mut rng)?;
        let e = sts_core::metrics::ece(&conf, &val_correct, config.metrics.bins)?;
        fitted.push((beta, model, trace));
        Ok(e)
    })?;
    let (_, model, trace) = fitted
        .into_iter()
        .find(|(b, _, _)| *b == selection.beta)
        .expect("selected beta was fitted");
    Ok(BranchFit {
        model,
        beta: selection.beta,
        trace,
        selection: Some(selection),
    })
}

/// Calibrates each checkpoint's classifier with `method`; writes `<method>.json`,
/// its loss CSV, and a tuning report when β was selected from the grid.
pub fn cmd_calibrate(config: &ExperimentConfig, checkpoints: &[PathBuf], method: Method) -> CliResult<Vec<CalibrateOutcome>> {
    if checkpoints.is_empty() {
        return Err(CliError::Usage("no checkpoints given".into()));
    }
    let task = load_splits(config)?;
    let mut out = Vec::new();
    let mut tuning = Vec::new();
    for path in checkpoints {
        let mut ck = load_checkpoint(path, &task.validation)?;
        let trial = ck.trial_seed;
        let dir = trial_dir(config, trial);
        let outcome = match method {
            Method::ScalarTs => {
                let val = &task.validation;
                let logits = ck.classifier.forward_logits(val.inputs())?;
                let t = calibrate_scalar_ts(&logits, val.labels(), ScalarTsSearch::default())?;
                ck.calibration = Calibration::ScalarTs { temperature: t };
                CalibrateOutcome {
                    trial_seed: trial,
                    method,
                    checkpoint: calibrated_path(config, trial, method),
                    beta: None,
                    temperature: Some(t),
                    selection: None,
                    trace: None,
                }
            }
            Method::Sts | Method::DirichletTs => {
                let fit = fit_branch(config, &ck, &task, method, true)?;
                let (_, branch, _) = fit.model.into_parts();
                ck.calibration = match method {
                    Method::Sts => Calibration::Sts { branch, beta: fit.beta },
                    _ => Calibration::DirichletTs { branch, beta: fit.beta },
                };
                write_atomic(&dir.join(format!("{}_loss.csv", method.name())), fit.trace.to_csv().as_bytes())?;
                if let Some(sel) = &fit.selection {
                    tuning.push(TuningRow {
                        trial_seed: trial,
                        method: method.name().to_string(),
                        selection: sel.clone(),
                    });
                }
                CalibrateOutcome {
                    trial_seed: trial,
                    method,
                    checkpoint: calibrated_path(config, trial, method),
                    beta: Some(fit.beta),
                    temperature: None,
                    selection: fit.selection,
                    trace: Some(fit.trace),
                }
            }
        };
        ck.save(&outcome.checkpoint)?;
        out.push(outcome);
    }
    if !tuning.is_empty() {
        let r = TuningReport::new(config.clone(), tuning);
        crate::report::write_pair(&config.output_dir, &format!("{}-tuning", method.name()), &r.to_json(), &r.to_table())?;
    }
    Ok(out)
}

/// Runs the β grid for each checkpoint and writes only the tuning report.
pub fn cmd_tune_beta(config: &ExperimentConfig, checkpoints: &[PathBuf], method: Method) -> CliResult<TuningReport> {
    if method == Method::ScalarTs {
        return Err(CliError::Usage("scalar-ts has no beta to tune".into()));
    }
    if config.beta_grid.is_empty() {
        return Err(CliError::Usage("beta_grid is empty".into()));
    }
    if checkpoints.is_empty() {
        return Err(CliError::Usage("no checkpoints given".into()));
    }
    let task = load_splits(config)?;
    let mut rows = Vec::new();
    for path in checkpoints {
        let ck = load_checkpoint(path, &task.validation)?;
        let fit = fit_branch(config, &ck, &task, method, true)?;
        rows.push(TuningRow {
            trial_seed: ck.trial_seed,
            method: method.name().to_string(),
            selection: fit.selection.expect("grid is nonempty"),
        });
    }
    let r = TuningReport::new(config.clone(), rows);
    crate::report::write_pair(&config.output_dir, &format!("{}-tuning", method.name()), &r.to_json(), &r.to_table())?;
    Ok(r)
}

fn evaluate_checkpoint(config: &ExperimentConfig, ck: &Checkpoint, test: &LabeledDataset) -> CliResult<TrialRow> {
    let x = test.inputs();
    let bins = config.metrics.bins;
    let logits = ck.classifier.forward_logits(x)?;
    let pred_pre = predict_from_logits(&logits);
    let conf_pre = softmax_confidence(&logits, 1.0);
    let mut rng = stage_rng(ck.trial_seed, STAGE_EVALUATE);
    let (pred_post, conf_post, beta, temperature) = match &ck.calibration {
        Calibration::Uncalibrated => (pred_pre.clone(), conf_pre.clone(), None, None),
        Calibration::ScalarTs { temperature: t } => {
            let scaled = logits.map(|v| v / t);
            (predict_from_logits(&scaled), softmax_confidence(&logits, *t), None, Some(*t))
        }
        Calibration::Sts { beta, .. } => {
            let m = ck.sts_model()?;
            let conf = sts_confidence(&m, x, config.metrics.confidence_samples, &mut rng)?;
            (m.predict_class(x)?, conf, Some(*beta), None)
        }
        Calibration::DirichletTs { beta, .. } => {
            let m = ck.sts_model()?;
            let (g, t) = m.logits_and_temperatures(x)?;
            let k = g.cols();
            let scaled: Vec<f64> = g.data().iter().enumerate().map(|(i, v)| v / t[i / k]).collect();
            let pred = predict_from_logits(&Tensor::matrix(g.rows(), k, scaled)?);
            (pred, dirichlet_ts_confidence(&m, x)?, Some(*beta), None)
        }
    };
    let (accuracy_pre, correct_pre) = accuracy(&pred_pre, test.labels());
    let (accuracy_post, correct_post) = accuracy(&pred_post, test.labels());
    let reliability_pre = reliability_table(&conf_pre, &correct_pre, bins)?;
    let reliability_post = reliability_table(&conf_post, &correct_post, bins)?;
    Ok(TrialRow {
        trial_seed: ck.trial_seed,
        pretrain_seed: ck.pretrain_seed,
        method: ck.calibration.name().to_string(),
        beta,
        temperature,
        accuracy_pre,
        accuracy_post,
        ece_pre: reliability_pre.ece(),
        ece_post: reliability_post.ece(),
        confidence_pre: mean(&conf_pre),
        confidence_post: mean(&conf_post),
        reliability_pre,
        reliability_post,
    })
}

/// Scores every checkpoint on the test split; writes `report.{json,txt}` and one
/// reliability CSV per checkpoint and stage under `reliability/`.
pub fn cmd_evaluate(config: &ExperimentConfig, checkpoints: &[PathBuf]) -> CliResult<CalibrationReport> {
    if checkpoints.is_empty() {
        return Err(CliError::Usage("no checkpoints given".into()));
    }
    let task = load_splits(config)?;
    let mut rows = Vec::new();
    for path in checkpoints {
        let ck = load_checkpoint(path, &task.test)?;
        let row = evaluate_checkpoint(config, &ck, &task.test)?;
        let rel = config.output_dir.join("reliability");
        let stem = format!("trial-{}-{}", row.trial_seed, row.method);
        write_atomic(&rel.join(format!("{stem}-pre.csv")), row.reliability_pre.to_csv().as_bytes())?;
        write_atomic(&rel.join(format!("{stem}-post.csv")), row.reliability_post.to_csv().as_bytes())?;
        rows.push(row);
    }
    let report = CalibrationReport::from_rows(config.clone(), rows);
    crate::report::write_pair(&config.output_dir, "report", &report.to_json(), &report.to_table())?;
    Ok(report)
}

/// Scores in-distribution and OOD test inputs with negated confidence, differential
/// entropy and expected entropy; writes `ood.{json,txt}`.
pub fn cmd_ood(config: &ExperimentConfig, checkpoints: &[PathBuf]) -> CliResult<OodReport> {
    if checkpoints.is_empty() {
        return Err(CliError::Usage("no checkpoints given".into()));
    }
    let ood_task = config.ood_task();
    if config.task.kind != TaskKind::File && ood_task.kind != TaskKind::File && ood_task.dim != config.task.dim {
        return Err(CliError::Usage(format!(
            "in-distribution task has {} inputs but the OOD task has {}",
            config.task.dim, ood_task.dim
        )));
    }
    let (_, _, in_test) = load_task(&config.task)?;
    let (_, _, ood_test) = load_task(&ood_task)?;
    if in_test.dim() != ood_test.dim() {
        return Err(CliError::Usage(format!(
            "in-distribution task has {} inputs but the OOD task has {}",
            in_test.dim(),
            ood_test.dim()
        )));
    }
    let p = config.metrics.confidence_samples;
    let mut rows = Vec::new();
    for path in checkpoints {
        let ck = load_checkpoint(path, &in_test)?;
        if !matches!(ck.calibration, Calibration::Sts { .. }) {
            return Err(CliError::Usage(format!(
                "{} is calibrated with {}; OOD scoring needs an sts checkpoint",
                path.display(),
                ck.calibration.name()
            )));
        }
        let model = ck.sts_model()?;
        let mut rng = stage_rng(ck.trial_seed, STAGE_OOD);
        let a = uncertainty_scores(&model, in_test.inputs(), p, &mut rng)?;
        let b = uncertainty_scores(&model, ood_test.inputs(), p, &mut rng)?;
        let neg = |v: &[f64]| v.iter().map(|c| -c).collect::<Vec<_>>();
        let score = |name: &str, i: &[f64], o: &[f64]| -> CliResult<DetectorScore> {
            let (auroc, aupr) = auroc_aupr(i, o)?;
            Ok(DetectorScore {
                detector: name.to_string(),
                auroc,
                aupr,
            })
        };
        rows.push(OodRow {
            trial_seed: ck.trial_seed,
            in_samples: in_test.len(),
            ood_samples: ood_test.len(),
            detectors: vec![
                score("confidence", &neg(&a.confidence), &neg(&b.confidence))?,
                score("differential-entropy", &a.differential_entropy, &b.differential_entropy)?,
                score("expected-entropy", &a.expected_entropy, &b.expected_entropy)?,
            ],
        });
    }
    let report = OodReport::from_rows(config.clone(), config.task.clone(), ood_task, rows);
    crate::report::write_pair(&config.output_dir, "ood", &report.to_json(), &report.to_table())?;
    Ok(report)
}
