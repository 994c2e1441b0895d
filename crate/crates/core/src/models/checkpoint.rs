use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MlpModel, StsModel, TemperatureBranch};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "sts-checkpoint/1";

/// What has been fitted on top of the classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Calibration {
    Uncalibrated,
    Sts { branch: TemperatureBranch, beta: f64 },
    ScalarTs { temperature: f64 },
    DirichletTs { branch: TemperatureBranch, beta: f64 },
}

impl Calibration {
    pub fn name(&self) -> &'static str {
        match self {
            Calibration::Uncalibrated => "uncalibrated",
            Calibration::Sts { .. } => "sts",
            Calibration::ScalarTs { .. } => "scalar-ts",
            Calibration::DirichletTs { .. } => "dirichlet-ts",
        }
    }
}

/// Everything needed to reproduce a model's predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub class_count: usize,
    pub input_dim: usize,
    pub pretrain_seed: u64,
    pub trial_seed: u64,
    pub min_temperature: f64,
    pub classifier: MlpModel,
    pub calibration: Calibration,
}

impl Checkpoint {
    pub fn new(classifier: MlpModel, pretrain_seed: u64, trial_seed: u64) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            class_count: classifier.output_dim(),
            input_dim: classifier.input_dim(),
            pretrain_seed,
            trial_seed,
            min_temperature: super::DEFAULT_MIN_TEMPERATURE,
            classifier,
            calibration: Calibration::Uncalibrated,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format {:?}", self.format)));
        }
        if self.class_count != self.classifier.output_dim() || self.input_dim != self.classifier.input_dim() {
            return Err(Error::Format("checkpoint dimensions disagree with the classifier".into()));
        }
        if let Calibration::Sts { branch, .. } | Calibration::DirichletTs { branch, .. } = &self.calibration {
            if branch.input_dim() != self.classifier.feature_dim() {
                return Err(Error::Format("temperature branch does not match the classifier features".into()));
            }
        }
        Ok(())
    }

    /// The calibrated model when the calibration carries a temperature branch.
    pub fn sts_model(&self) -> Result<StsModel> {
        match &self.calibration {
            Calibration::Sts { branch, .. } | Calibration::DirichletTs { branch, .. } => {
                StsModel::new(self.classifier.clone(), branch.clone(), self.min_temperature)
            }
            other => Err(Error::arg(format!("checkpoint calibration is {}, not a temperature branch", other.name()))),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}

/// Replaces `path` with `bytes` so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Rng, Tensor};

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = Rng::new(5);
        let classifier = MlpModel::default_classifier(3, 4, &mut rng).unwrap();
        let branch = TemperatureBranch::default_branch(classifier.feature_dim(), &mut rng).unwrap();
        let mut c = Checkpoint::new(classifier, 5, 11);
        c.calibration = Calibration::Sts { branch, beta: 0.7 };
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.json");
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);

        let a = c.sts_model().unwrap();
        let b = back.sts_model().unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-3.0, 2.0, 9.0]]).unwrap();
        let (la, ta) = a.logits_and_temperatures(&x).unwrap();
        let (lb, tb) = b.logits_and_temperatures(&x).unwrap();
        assert!(la.data().iter().zip(lb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(ta.iter().zip(&tb).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let c = sample_checkpoint();
        let json = c.to_json().unwrap();
        assert!(matches!(Checkpoint::from_json(&json[..json.len() / 2]), Err(Error::Format(_))));
        let wrong = json.replacen(CHECKPOINT_FORMAT, "other/9", 1);
        assert!(matches!(Checkpoint::from_json(&wrong), Err(Error::Format(_))));
        let mut bad = c.clone();
        bad.class_count = 7;
        assert!(matches!(Checkpoint::from_json(&bad.to_json().unwrap()), Err(Error::Format(_))));
    }

    #[test]
    fn scalar_calibration_has_no_branch() {
        let mut c = sample_checkpoint();
        c.calibration = Calibration::ScalarTs { temperature: 1.5 };
        assert!(c.sts_model().is_err());
        let back = Checkpoint::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back.calibration, Calibration::ScalarTs { temperature: 1.5 });
    }
}
