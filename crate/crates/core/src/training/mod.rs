//! Losses, optimizer, learning-rate schedule and the training loop.

mod adam;
mod step;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::model::ModelError;
use crate::skeleton::{MotionSequence, SkeletonError};

pub use adam::AdamState;
pub use step::{batch_loss, prepare_pair, training_step, StepMetrics, TrainItem, TrainPair};
pub use trainer::{checkpoint_path, read_metrics, TrainOutcome, Trainer, CHECKPOINT_FILE, METRICS_FILE, METRICS_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target bone {bone} has zero length at frame {frame}")]
    ZeroBoneLength { bone: usize, frame: usize },
    #[error("non-finite loss at step {step}: rec={rec}, blc={blc}")]
    NonFinite { step: u64, rec: f64, blc: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyData,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_blc: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Length of one full triangle of the cyclic schedule, in steps.
    pub lr_period: u64,
    pub finetune: bool,
    pub finetune_lr: f64,
    pub iterations: u64,
    pub seed: u64,
    /// Drop probability of major joints during joint subsampling.
    pub p_major: f64,
    /// Drop probability of the remaining non-root joints.
    pub p_other: f64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_blc: 0.5,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr_min: 1e-5,
            lr_max: 1e-4,
            lr_period: 2_000,
            finetune: false,
            finetune_lr: 5e-5,
            iterations: 1_000,
            seed: 0,
            p_major: 0.1,
            p_other: 0.5,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::Config(m.to_string()));
        if !(self.lr_min > 0.0 && self.lr_max >= self.lr_min && self.finetune_lr > 0.0) {
            return bad("learning-rate bounds must be positive with lr_min <= lr_max");
        }
        if self.lr_period == 0 {
            return bad("lr_period must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("adam betas must lie in [0, 1) and epsilon must be positive");
        }
        if !(self.lambda_blc >= 0.0) {
            return bad("lambda_blc must be non-negative");
        }
        for p in [self.p_major, self.p_other] {
            if !(0.0..1.0).contains(&p) {
                return bad("drop probabilities must lie in [0, 1)");
            }
        }
        Ok(())
    }
}

/// Learning rate used at `step` (0-based).
///
/// Triangle wave between `lr_min` and `lr_max` starting at the minimum and
/// peaking at half a period; constant `finetune_lr` in fine-tuning mode.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.finetune {
        return cfg.finetune_lr;
    }
    let phase = (step % cfg.lr_period) as f64 / cfg.lr_period as f64;
    let tri = 1.0 - (2.0 * phase - 1.0).abs();
    cfg.lr_min + (cfg.lr_max - cfg.lr_min) * tri
}

fn check_shapes(pred: &MotionSequence, target: &MotionSequence) -> Result<(), TrainingError> {
    if pred.joint_count() != target.joint_count() || pred.frame_count() != target.frame_count() {
        return Err(TrainingError::Shape(format!(
            "{}x{} vs {}x{}",
            pred.joint_count(),
            pred.frame_count(),
            target.joint_count(),
            target.frame_count()
        )));
    }
    Ok(())
}

/// Mean over joints and frames of the squared position error.
pub fn loss_rec(pred: &MotionSequence, target: &MotionSequence) -> Result<f64, TrainingError> {
    check_shapes(pred, target)?;
    let n = pred.positions().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = pred.positions().iter().zip(target.positions()).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok(sum / n as f64)
}

/// Mean over bones of the population variance, over frames, of the ratio
/// between predicted and target bone length. Bones follow the target's
/// topology.
pub fn loss_blc(pred: &MotionSequence, target: &MotionSequence) -> Result<f64, TrainingError> {
    check_shapes(pred, target)?;
    let bones = target.topology().bones();
    if bones.is_empty() {
        return Ok(0.0);
    }
    let frames = target.frame_count();
    let mut total = 0.0;
    for (b, &(c, p)) in bones.iter().enumerate() {
        let mut ratios = Vec::with_capacity(frames);
        for f in 0..frames {
            let t = (target.at(c, f) - target.at(p, f)).norm();
            if t == 0.0 {
                return Err(TrainingError::ZeroBoneLength { bone: b, frame: f });
            }
            ratios.push((pred.at(c, f) - pred.at(p, f)).norm() / t);
        }
        let mean = ratios.iter().sum::<f64>() / frames as f64;
        total += ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / frames as f64;
    }
    Ok(total / bones.len() as f64)
}

/// Deterministic 64-bit mixing (SplitMix64 finalizer) used to derive
/// independent seeds from `(seed, step, item, stream)`.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
