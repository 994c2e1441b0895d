//! Experiment configuration: TOML on disk, merged over built-in defaults, then
//! `key.path=value` overrides, then validated.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sts_core::calibrate::TrainConfig;
use sts_core::data::TaskSpec;
use sts_core::mixup::{default_beta_grid, MixupConfig};
use sts_core::models::DEFAULT_MIN_TEMPERATURE;
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

/// Environment variable that anchors a relative `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "STS_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    /// Number of classifier layers that make up the feature extractor.
    pub cut_index: usize,
    pub branch_hidden: Vec<usize>,
    pub min_temperature: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden: vec![64, 64],
            cut_index: 2,
            branch_hidden: vec![128, 64],
            min_temperature: DEFAULT_MIN_TEMPERATURE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSettings {
    /// Concrete draws per input for confidence and entropies.
    pub confidence_samples: usize,
    pub bins: usize,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings {
            confidence_samples: sts_core::metrics::DEFAULT_CONFIDENCE_SAMPLES,
            bins: sts_core::metrics::DEFAULT_BINS,
        }
    }
}

/// Split that feeds Multi-Mixup during branch training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixupSource {
    Validation,
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// One pretrain/calibrate/evaluate run per seed.
    pub trial_seeds: Vec<u64>,
    pub task: TaskSpec,
    pub model: ModelSpec,
    pub pretrain: TrainConfig,
    pub calibration: TrainConfig,
    /// Optimizer settings for the Dirichlet baseline.
    pub dirichlet: TrainConfig,
    pub mixup: MixupConfig,
    /// Candidate β values selected by validation ECE; empty means use `mixup.beta`.
    pub beta_grid: Vec<f64>,
    pub mixup_source: MixupSource,
    pub metrics: MetricSettings,
    /// OOD task; defaults to the main task moved 8 units along the first axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood: Option<TaskSpec>,
}

impl ExperimentConfig {
    fn defaults_table() -> Table {
        let d = ExperimentConfig {
            output_dir: PathBuf::from("runs"),
            trial_seeds: vec![0],
            task: TaskSpec::default(),
            model: ModelSpec::default(),
            pretrain: TrainConfig::pretrain_default(),
            calibration: TrainConfig::calibration_default(),
            dirichlet: TrainConfig::dirichlet_ts_default(),
            mixup: MixupConfig::default(),
            beta_grid: default_beta_grid(),
            mixup_source: MixupSource::Validation,
            metrics: MetricSettings::default(),
            ood: None,
        };
        let mut t = Table::try_from(&d).expect("default config serializes");
        // every experiment must state its seeds
        t.remove("trial_seeds");
        t
    }

    /// Parses `text`, merges it over the defaults, applies `overrides`
    /// (`a.b=value`, value in TOML syntax or a bare string), then validates.
    /// A relative `output_dir` is placed under `output_root` when given.
    pub fn from_toml(text: &str, overrides: &[String], output_root: Option<&Path>) -> CliResult<Self> {
        let user: Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let mut merged = Self::defaults_table();
        merge(&mut merged, user);
        for o in overrides {
            apply_override(&mut merged, o)?;
        }
        let mut config: ExperimentConfig = serde_path_to_error::deserialize(Value::Table(merged)).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                CliError::Config(inner.to_string())
            } else {
                CliError::Config(format!("{path}: {inner}"))
            }
        })?;
        if let Some(root) = output_root {
            if config.output_dir.is_relative() {
                config.output_dir = root.join(&config.output_dir);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String], output_root: Option<&Path>) -> CliResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides, output_root)
    }

    pub fn validate(&self) -> CliResult<()> {
        let field = |name: &str, e: sts_core::Error| CliError::Config(format!("{name}: {e}"));
        if self.trial_seeds.is_empty() {
            return Err(CliError::Config("trial_seeds: at least one seed is required".into()));
        }
        self.task.validate().map_err(|e| field("task", e))?;
        if let Some(ood) = &self.ood {
            ood.validate().map_err(|e| field("ood", e))?;
        }
        self.pretrain.validate().map_err(|e| field("pretrain", e))?;
        self.calibration.validate().map_err(|e| field("calibration", e))?;
        self.dirichlet.validate().map_err(|e| field("dirichlet", e))?;
        if self.task.kind != sts_core::data::TaskKind::File {
            self.mixup.validate(self.task.classes).map_err(|e| field("mixup", e))?;
        }
        if let Some(b) = self.beta_grid.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(CliError::Config(format!("beta_grid: values must be positive, got {b}")));
        }
        let m = &self.model;
        if m.cut_index == 0 || m.cut_index > m.hidden.len() {
            return Err(CliError::Config(format!(
                "model.cut_index: must lie in 1..={} for {} hidden layer(s)",
                m.hidden.len(),
                m.hidden.len()
            )));
        }
        if m.hidden.contains(&0) || m.branch_hidden.contains(&0) {
            return Err(CliError::Config("model: layer widths must be positive".into()));
        }
        if !(m.min_temperature > 0.0) {
            return Err(CliError::Config("model.min_temperature: must be positive".into()));
        }
        if self.metrics.confidence_samples == 0 || self.metrics.bins == 0 {
            return Err(CliError::Config("metrics: sample and bin counts must be positive".into()));
        }
        Ok(())
    }

    /// The configured OOD task, or the main task shifted far along the first axis.
    pub fn ood_task(&self) -> TaskSpec {
        self.ood.clone().unwrap_or_else(|| TaskSpec {
            shift: self.task.shift + 8.0,
            seed: self.task.seed.wrapping_add(1),
            ..self.task.clone()
        })
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(table: &mut Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not of the form key=value")))?;
    let key = key.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = ExperimentConfig::from_toml("trial_seeds = [0, 1]", &[], None).unwrap();
        assert_eq!(c.trial_seeds, vec![0, 1]);
        assert_eq!(c.calibration.learning_rate, 1e-3);
        assert_eq!(c.calibration.epochs, 500);
        assert_eq!((c.mixup.r, c.mixup.s), (10, 10));
        assert_eq!(c.metrics.confidence_samples, 30);
        assert_eq!(c.metrics.bins, 10);
        assert_eq!(c.beta_grid.len(), 19);
        assert_eq!(c.mixup_source, MixupSource::Validation);
    }

    #[test]
    fn missing_seeds_names_the_field() {
        let e = ExperimentConfig::from_toml("[task]\nclasses = 3", &[], None).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("trial_seeds"), "{e}");
    }

    #[test]
    fn type_errors_carry_the_field_path() {
        let e = ExperimentConfig::from_toml("trial_seeds = [0]\n[calibration]\nepochs = \"many\"", &[], None).unwrap_err();
        assert!(e.to_string().contains("calibration.epochs"), "{e}");
        let e = ExperimentConfig::from_toml("trial_seeds = [0]\n[mixup]\nbogus = 1", &[], None).unwrap_err();
        assert!(e.to_string().contains("mixup"), "{e}");
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let c = ExperimentConfig::from_toml("trial_seeds = [3]\n[pretrain]\nepochs = 7", &[], None).unwrap();
        assert_eq!(c.pretrain.epochs, 7);
        assert_eq!(c.pretrain.learning_rate, 0.1);
    }

    #[test]
    fn overrides_win_and_parse_toml_values() {
        let o = vec!["task.dim=5".to_string(), "mixup_source=train".to_string(), "beta_grid=[0.5, 1.0]".to_string()];
        let c = ExperimentConfig::from_toml("trial_seeds = [0]\n[task]\ndim = 3", &o, None).unwrap();
        assert_eq!(c.task.dim, 5);
        assert_eq!(c.mixup_source, MixupSource::Train);
        assert_eq!(c.beta_grid, vec![0.5, 1.0]);
        assert!(ExperimentConfig::from_toml("trial_seeds = [0]", &["nokey".into()], None).is_err());
    }

    #[test]
    fn output_root_anchors_relative_dirs_only() {
        let root = Path::new("/tmp/root");
        let c = ExperimentConfig::from_toml("trial_seeds = [0]\noutput_dir = \"x\"", &[], Some(root)).unwrap();
        assert_eq!(c.output_dir, PathBuf::from("/tmp/root/x"));
        let c = ExperimentConfig::from_toml("trial_seeds = [0]\noutput_dir = \"/abs\"", &[], Some(root)).unwrap();
        assert_eq!(c.output_dir, PathBuf::from("/abs"));
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in ["trial_seeds = []", "trial_seeds = [0]\nbeta_grid = [0.0]", "trial_seeds = [0]\n[model]\ncut_index = 5"] {
            let e = ExperimentConfig::from_toml(bad, &[], None).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}");
        }
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let c = ExperimentConfig::from_toml("trial_seeds = [0, 1]", &[], None).unwrap();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text, &[], None).unwrap(), c);
    }
}
