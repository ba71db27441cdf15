//! Training: seeded initialisation, the step-decay schedule, ADAM with
//! coupled weight decay, teacher pretraining and the joint distillation
//! stage.

mod engine;
mod optim;

pub use engine::{pretrain_teacher, train_ekd, train_supervised, EkdOutcome, TraceRow, TrainTrace};
pub use optim::Adam;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::DataError;
use crate::loss::{LossError, LossWeights};
use crate::model::{ModelError, ParamDef, ParamKind, ParamState};

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.01;
/// Momentum of the batch-norm running-statistic update.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("epoch {epoch} is outside 0..{epochs}")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("pretrained teacher {index} does not fit its spec: {detail}")]
    TeacherMismatch { index: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Hyper-parameters of one training stage.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Fractions of the total epochs at which the learning rate drops.
    pub lr_drop_points: Vec<f64>,
    /// Divisor applied at every drop point.
    pub drop_factor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub augment: bool,
    /// Leave teacher parameters and statistics untouched during the joint
    /// stage (teachers then run in inference mode).
    pub freeze_teachers: bool,
    /// Route the distillation term into the teachers as well, instead of the
    /// default cross-entropy-only teacher objective.
    pub teacher_full_kd: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            base_lr: 0.01,
            lr_drop_points: vec![0.5, 0.75],
            drop_factor: 10.0,
            weight_decay: 5e-4,
            batch_size: 128,
            seed: 0,
            loss_weights: LossWeights::default(),
            augment: false,
            freeze_teachers: false,
            teacher_full_kd: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.base_lr.is_nan() || self.base_lr < 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "base_lr must be nonnegative, got {}",
                self.base_lr
            )));
        }
        if self.drop_factor <= 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "drop_factor must be positive, got {}",
                self.drop_factor
            )));
        }
        if self.lr_drop_points.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(TrainError::InvalidConfig(format!(
                "lr drop points must lie strictly inside (0,1), got {:?}",
                self.lr_drop_points
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::InvalidConfig("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant step-decay schedule.
///
/// The rate starts at `base_lr` and is divided by `drop_factor` at every
/// drop point; the first affected epoch is `ceil(point * epochs)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64, TrainError> {
    if epoch >= config.epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            epochs: config.epochs,
        });
    }
    let mut lr = config.base_lr;
    for &point in &config.lr_drop_points {
        let boundary = (point * config.epochs as f64).ceil() as usize;
        if epoch >= boundary {
            lr /= config.drop_factor;
        }
    }
    Ok(lr)
}

/// Allocates and initialises every declared tensor: weights drawn from a
/// zero-mean Gaussian with standard deviation 0.01 under a ChaCha stream
/// seeded by `seed`, biases zero, batch-norm scales one and shifts zero.
pub fn init_params(defs: &[ParamDef], seed: u64) -> ParamState {
    let mut state = ParamState::allocate(defs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    for def in defs {
        if def.kind == ParamKind::Weight {
            state
                .get_mut(&def.name)
                .mapv_inplace(|_| normal.sample(&mut rng));
        }
    }
    state
}

#[cfg(test)]
mod tests;
