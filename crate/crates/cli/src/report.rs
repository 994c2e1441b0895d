//! Persisted reports. Every report embeds the resolved config and per-trial raw
//! values; aggregates are recomputed from those values.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sts_core::data::TaskSpec;
use sts_core::metrics::ReliabilityTable;
use sts_core::mixup::BetaSelection;
use sts_core::models::write_atomic;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const REPORT_FORMAT: &str = "sts-report/1";
pub const OOD_REPORT_FORMAT: &str = "sts-ood-report/1";
pub const TUNING_REPORT_FORMAT: &str = "sts-tuning-report/1";

/// Mean and sample standard deviation (zero for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Aggregate {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Aggregate { mean, std }
    }

    fn percent(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial_seed: u64,
    pub pretrain_seed: u64,
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub temperature: Option<f64>,
    pub accuracy_pre: f64,
    pub accuracy_post: f64,
    pub ece_pre: f64,
    pub ece_post: f64,
    pub confidence_pre: f64,
    pub confidence_post: f64,
    pub reliability_pre: ReliabilityTable,
    pub reliability_post: ReliabilityTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub trials: usize,
    pub accuracy_pre: Aggregate,
    pub accuracy_post: Aggregate,
    pub ece_pre: Aggregate,
    pub ece_post: Aggregate,
    pub confidence_pre: Aggregate,
    pub confidence_post: Aggregate,
}

/// Accuracy and ECE before and after calibration, per trial and per method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub format: String,
    pub config: ExperimentConfig,
    pub rows: Vec<TrialRow>,
    pub summary: Vec<MethodSummary>,
}

fn methods_in_order<'a>(names: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for n in names {
        if !out.iter().any(|m| m == n) {
            out.push(n.to_string());
        }
    }
    out
}

impl CalibrationReport {
    pub fn from_rows(config: ExperimentConfig, rows: Vec<TrialRow>) -> Self {
        let summary = methods_in_order(rows.iter().map(|r| r.method.as_str()))
            .into_iter()
            .map(|method| {
                let rs: Vec<&TrialRow> = rows.iter().filter(|r| r.method == method).collect();
                let agg = |f: fn(&TrialRow) -> f64| Aggregate::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
                MethodSummary {
                    trials: rs.len(),
                    accuracy_pre: agg(|r| r.accuracy_pre),
                    accuracy_post: agg(|r| r.accuracy_post),
                    ece_pre: agg(|r| r.ece_pre),
                    ece_post: agg(|r| r.ece_post),
                    confidence_pre: agg(|r| r.confidence_pre),
                    confidence_post: agg(|r| r.confidence_post),
                    method,
                }
            })
            .collect();
        CalibrationReport {
            format: REPORT_FORMAT.to_string(),
            config,
            rows,
            summary,
        }
    }

    /// Rebuilds the report from its stored per-trial values.
    pub fn reemit(&self) -> Self {
        Self::from_rows(self.config.clone(), self.rows.clone())
    }

    pub fn summary_for(&self, method: &str) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let r: CalibrationReport = from_json(text)?;
        if r.format != REPORT_FORMAT {
            return Err(CliError::Usage(format!("not a calibration report: format {:?}", r.format)));
        }
        Ok(r)
    }

    /// Human-readable table; accuracy and ECE in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>6}  {:>18}  {:>18}  {:>16}  {:>16}  {:>9}  {:>9}",
            "method", "trials", "accuracy pre (%)", "accuracy post (%)", "ECE pre (%)", "ECE post (%)", "conf pre", "conf post"
        );
        for m in &self.summary {
            let _ = writeln!(
                s,
                "{:<14} {:>6}  {:>18}  {:>18}  {:>16}  {:>16}  {:>9.4}  {:>9.4}",
                m.method,
                m.trials,
                m.accuracy_pre.percent(),
                m.accuracy_post.percent(),
                m.ece_pre.percent(),
                m.ece_post.percent(),
                m.confidence_pre.mean,
                m.confidence_post.mean
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<14} {:>10}  {:>8}  {:>10}  {:>9}  {:>9}  {:>9}  {:>9}",
            "method", "trial", "beta", "T", "acc pre", "acc post", "ECE pre", "ECE post"
        );
        for r in &self.rows {
            let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$}"));
            let _ = writeln!(
                s,
                "{:<14} {:>10}  {:>8}  {:>10}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}",
                r.method,
                r.trial_seed,
                opt(r.beta, 2),
                opt(r.temperature, 4),
                r.accuracy_pre,
                r.accuracy_post,
                r.ece_pre,
                r.ece_post
            );
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorScore {
    pub detector: String,
    pub auroc: f64,
    pub aupr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub trial_seed: u64,
    pub in_samples: usize,
    pub ood_samples: usize,
    pub detectors: Vec<DetectorScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub detector: String,
    pub auroc: Aggregate,
    pub aupr: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub format: String,
    pub config: ExperimentConfig,
    pub in_task: TaskSpec,
    pub ood_task: TaskSpec,
    /// AUPR treats this set as the positive class.
    pub positive_class: String,
    pub rows: Vec<OodRow>,
    pub summary: Vec<DetectorSummary>,
}

impl OodReport {
    pub fn from_rows(config: ExperimentConfig, in_task: TaskSpec, ood_task: TaskSpec, rows: Vec<OodRow>) -> Self {
        let names = methods_in_order(rows.iter().flat_map(|r| r.detectors.iter().map(|d| d.detector.as_str())));
        let summary = names
            .into_iter()
            .map(|detector| {
                let scores: Vec<&DetectorScore> =
                    rows.iter().flat_map(|r| r.detectors.iter()).filter(|d| d.detector == detector).collect();
                DetectorSummary {
                    auroc: Aggregate::of(&scores.iter().map(|d| d.auroc).collect::<Vec<_>>()),
                    aupr: Aggregate::of(&scores.iter().map(|d| d.aupr).collect::<Vec<_>>()),
                    detector,
                }
            })
            .collect();
        OodReport {
            format: OOD_REPORT_FORMAT.to_string(),
            config,
            in_task,
            ood_task,
            positive_class: "ood".to_string(),
            rows,
            summary,
        }
    }

    pub fn summary_for(&self, detector: &str) -> Option<&DetectorSummary> {
        self.summary.iter().find(|s| s.detector == detector)
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "positive class: {}", self.positive_class);
        let _ = writeln!(s, "{:<22} {:>18}  {:>18}", "detector", "AUROC (%)", "AUPR (%)");
        for d in &self.summary {
            let _ = writeln!(s, "{:<22} {:>18}  {:>18}", d.detector, d.auroc.percent(), d.aupr.percent());
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningRow {
    pub trial_seed: u64,
    pub method: String,
    pub selection: BetaSelection,
}

/// Validation ECE for every β in the grid; diverged settings carry no score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub format: String,
    pub config: ExperimentConfig,
    pub rows: Vec<TuningRow>,
}

impl TuningReport {
    pub fn new(config: ExperimentConfig, rows: Vec<TuningRow>) -> Self {
        TuningReport {
            format: TUNING_REPORT_FORMAT.to_string(),
            config,
            rows,
        }
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(s, "{} trial {}: chosen beta {:.2} (validation ECE {:.4})", r.method, r.trial_seed, r.selection.beta, r.selection.ece);
            for sc in &r.selection.scores {
                let e = sc.ece.map_or("diverged".to_string(), |e| format!("{e:.4}"));
                let _ = writeln!(s, "  beta {:>5.2}  {}", sc.beta, e);
            }
        }
        s
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn from_json<T: for<'de> Deserialize<'de>>(text: &str) -> CliResult<T> {
    serde_json::from_str(text).map_err(|e| CliError::Usage(format!("malformed report: {e}")))
}

/// Writes `<stem>.json` and `<stem>.txt` into `dir`, each atomically.
pub fn write_pair(dir: &Path, stem: &str, json: &str, table: &str) -> CliResult<()> {
    write_atomic(&dir.join(format!("{stem}.json")), json.as_bytes())?;
    write_atomic(&dir.join(format!("{stem}.txt")), table.as_bytes())?;
    Ok(())
}
