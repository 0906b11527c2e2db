use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, prepare_pair, training_step, AdamState, StepMetrics, TrainConfig, TrainItem, TrainingError};
use crate::model::{save_checkpoint, Checkpoint, Model};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,lr,l_rec,l_blc,total";
pub const CHECKPOINT_FILE: &str = "checkpoint.skck";

/// Why a run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainOutcome {
    Completed,
    Stopped,
}

/// Model, optimizer state and training data for one run.
pub struct Trainer {
    model: Model,
    adam: AdamState,
    config: TrainConfig,
    items: Vec<TrainItem>,
    meta: String,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, items: Vec<TrainItem>) -> Result<Self, TrainingError> {
        Self::with_state(model, AdamState::new(), config, items)
    }

    /// Continues from a checkpoint: parameters, moments and step count.
    pub fn resume(ck: &Checkpoint, config: TrainConfig, items: Vec<TrainItem>) -> Result<Self, TrainingError> {
        let model = ck.model()?;
        let adam = AdamState::from_parts(ck.step, ck.moments.clone());
        let mut t = Self::with_state(model, adam, config, items)?;
        t.meta = ck.meta.clone();
        Ok(t)
    }

    fn with_state(model: Model, adam: AdamState, config: TrainConfig, items: Vec<TrainItem>) -> Result<Self, TrainingError> {
        config.validate()?;
        if items.is_empty() {
            return Err(TrainingError::EmptyData);
        }
        Ok(Trainer { model, adam, config, items, meta: String::new() })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step()
    }

    pub fn set_meta(&mut self, meta: impl Into<String>) {
        self.meta = meta.into();
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.adam.step(), self.meta.clone(), self.adam.moments().clone())
    }

    /// Batch indices for `step`, drawn uniformly with replacement.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.seed, step, 0]));
        (0..self.config.batch_size).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    /// One optimizer step; all randomness derives from `(seed, step)`.
    pub fn step(&mut self) -> Result<StepMetrics, TrainingError> {
        let step = self.adam.step();
        let pairs = self
            .batch_indices(step)
            .into_iter()
            .enumerate()
            .map(|(i, k)| prepare_pair(&self.items[k], &self.config, step, i))
            .collect::<Result<Vec<_>, _>>()?;
        training_step(&self.model, &mut self.adam, &pairs, &self.config)
    }

    /// Trains until `config.iterations` steps are complete or `stop`
    /// returns true, appending to `dir/metrics.csv` and checkpointing to
    /// `dir/checkpoint.skck`. A non-finite loss aborts without writing a
    /// checkpoint, so the last one on disk stays valid.
    pub fn run(
        &mut self,
        dir: &Path,
        mut stop: impl FnMut(&Trainer, &StepMetrics) -> bool,
    ) -> Result<TrainOutcome, TrainingError> {
        fs::create_dir_all(dir)?;
        let metrics_path = dir.join(METRICS_FILE);
        truncate_metrics(&metrics_path, self.adam.step())?;
        let mut csv = OpenOptions::new().create(true).append(true).open(&metrics_path)?;
        if csv.metadata()?.len() == 0 {
            writeln!(csv, "{METRICS_HEADER}")?;
        }
        let ck_path = checkpoint_path(dir);
        while self.adam.step() < self.config.iterations {
            let m = self.step()?;
            writeln!(csv, "{},{},{},{},{}", m.step, m.lr, m.rec, m.blc, m.total)?;
            csv.flush()?;
            log::info!("step {} lr {:.3e} rec {:.6} blc {:.6}", m.step, m.lr, m.rec, m.blc);
            let done = self.adam.step() >= self.config.iterations;
            let stopping = stop(self, &m);
            if done || stopping || m.step % self.config.checkpoint_every.max(1) == 0 {
                save_checkpoint(&ck_path, &self.checkpoint())?;
            }
            if stopping {
                return Ok(TrainOutcome::Stopped);
            }
        }
        save_checkpoint(&ck_path, &self.checkpoint())?;
        Ok(TrainOutcome::Completed)
    }
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}

/// Drops rows past `step`, left over from a run that died after its last
/// checkpoint.
fn truncate_metrics(path: &Path, step: u64) -> Result<(), TrainingError> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0 || line.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step);
        if keep {
            kept.push(line);
        }
    }
    let mut out = kept.join("\n");
    if !out.is_empty() {
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses a metrics file written by [`Trainer::run`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>, TrainingError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(TrainingError::Config(format!("{} lacks the metrics header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64, TrainingError> {
                f.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| TrainingError::Config(format!("bad metrics row: {l}")))
            };
            Ok(StepMetrics { step: num(0)? as u64, lr: num(1)?, rec: num(2)?, blc: num(3)?, total: num(4)? })
        })
        .collect()
}
