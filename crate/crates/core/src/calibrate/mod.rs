//! Pretraining, temperature-branch calibration, and the scalar and Dirichlet baselines.

mod losses;
mod optim;
mod train;

use serde::{Deserialize, Serialize};

pub use losses::{cross_entropy_loss, dirichlet_ts_nll, scaled_nll, sts_nll, DIRICHLET_EXPONENT_CLAMP};
pub use optim::Optimizer;
pub use train::{
    branch_loss_and_gradient, calibrate_dirichlet_ts, calibrate_scalar_ts, calibrate_sts, classifier_loss_and_gradient, pretrain,
    BranchObjective, ScalarTsSearch,
};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Loss magnitude beyond which a run counts as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// `lr₀ · (1 + cos(π t / T)) / 2` with `t` the epoch index.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Minibatch size for pretraining. Calibration batches hold `r · s` mixup samples.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// SGD with momentum 0.9, cosine-annealed from 0.1, weight decay 5e-4, batch 128, 200 epochs.
    pub fn pretrain_default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::SgdMomentum,
            schedule: LrSchedule::Cosine,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 200,
            seed: 0,
        }
    }

    /// Adam at a fixed 0.001, weight decay 5e-4, 500 epochs.
    pub fn calibration_default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            schedule: LrSchedule::Constant,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 100,
            epochs: 500,
            seed: 0,
        }
    }

    /// The calibration defaults with the learning rate lowered to 1e-6.
    pub fn dirichlet_ts_default() -> Self {
        TrainConfig {
            learning_rate: 1e-6,
            ..TrainConfig::calibration_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::arg(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::arg("weight decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Per-epoch mean losses of one optimization run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epoch_losses: Vec<f64>,
    pub diverged: bool,
    /// FNV-1a hash of the final parameter bits, hex encoded.
    pub snapshot_id: String,
}

impl TrainTrace {
    /// `epoch,loss` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, l));
        }
        out
    }
}

pub fn is_divergent(loss: f64) -> bool {
    !loss.is_finite() || loss.abs() > DIVERGENCE_THRESHOLD
}

pub(crate) fn snapshot_id<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in params {
        for v in t.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    format!("{h:016x}")
}
