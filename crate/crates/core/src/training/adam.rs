use std::collections::BTreeMap;

use candle_core::Tensor;

use super::{TrainConfig, TrainingError};
use crate::model::ParamStore;

/// Adam moments and step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(step: u64, moments: BTreeMap<String, (Tensor, Tensor)>) -> Self {
        AdamState { step, moments }
    }

    /// Completed updates.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, (Tensor, Tensor)> {
        &self.moments
    }

    /// Bias-corrected Adam update; parameters without a gradient see a
    /// zero gradient.
    pub fn update(
        &mut self,
        params: &ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<(), TrainingError> {
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, var) in params.iter() {
            let zero = var.as_tensor().zeros_like()?;
            let g = grads.get(name).unwrap_or(&zero);
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (zero.clone(), zero.clone()),
            };
            let m = (m.affine(cfg.beta1, 0.0)? + g.affine(1.0 - cfg.beta1, 0.0)?)?.detach();
            let v = (v.affine(cfg.beta2, 0.0)? + g.sqr()?.affine(1.0 - cfg.beta2, 0.0)?)?.detach();
            let denom = (v.affine(1.0 / c2, 0.0)?.sqrt()? + cfg.epsilon)?;
            let delta = (m.affine(lr / c1, 0.0)? / denom)?;
            var.set(&(var.as_tensor().detach() - delta)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        self.step += 1;
        Ok(())
    }
}
