//! Two-stage training: contrastive on triplets, then Pearson loss on scored
//! pairs, with a Spearman evaluation harness and the three-arm experiment.

mod eval;
mod experiment;
mod train;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::VarianceGuard;

pub use eval::{evaluate, pair_cosines, spearman_x100, EvalReport};
pub use experiment::{
    run_ceiling_experiment, ArmResult, ExperimentConfig, ExperimentReport, ExperimentSummary,
    SeedRun, Arm, EXPERIMENT_CSV_HEADER,
};
pub use train::{contrastive_step, pearson_step, train_stage1, train_stage2};

/// Contrastive tuning (`I`) or Pearson-loss tuning (`II`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// InfoNCE temperature; stage I only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub seed: u64,
    /// Evaluate on the dev set every this many steps; 0 disables.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub variance_guard: VarianceGuard,
    /// Start the stage with fresh Adam moments.
    #[serde(default = "default_true")]
    pub reset_optimizer: bool,
}

fn default_true() -> bool {
    true
}

pub const DEFAULT_TEMPERATURE: f64 = 0.05;

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            stage: Stage::I,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 60,
            temperature: Some(DEFAULT_TEMPERATURE),
            seed: 0,
            eval_every: 0,
            variance_guard: VarianceGuard::default(),
            reset_optimizer: true,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: Stage::II,
            learning_rate: 1e-3,
            batch_size: 200,
            epochs: 20,
            temperature: None,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        match (self.stage, self.temperature) {
            (Stage::I, Some(t)) if t > 0.0 && t.is_finite() => Ok(()),
            (Stage::I, Some(t)) => Err(Error::invalid(format!("temperature must be positive, got {t}"))),
            (Stage::I, None) => Err(Error::invalid("stage I requires a temperature")),
            (Stage::II, Some(_)) => Err(Error::invalid("temperature applies to stage I only")),
            (Stage::II, None) => Ok(()),
        }
    }

    pub(crate) fn expect_stage(&self, stage: Stage) -> Result<()> {
        self.validate()?;
        if self.stage != stage {
            return Err(Error::invalid(format!(
                "configuration is for stage {:?}, expected {stage:?}",
                self.stage
            )));
        }
        Ok(())
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_spearman_x100: Option<f64>,
}

/// Per-step records plus wall-clock times kept apart so the records stay
/// reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
    pub wall_secs: Vec<f64>,
}

#[derive(Serialize)]
struct TimingRecord {
    step: u64,
    wall_secs: f64,
}

impl TrainingLog {
    pub fn epoch_mean_losses(&self) -> Vec<f64> {
        let Some(last) = self.records.last() else {
            return Vec::new();
        };
        let mut sums = vec![(0.0, 0usize); last.epoch + 1];
        for r in &self.records {
            sums[r.epoch].0 += r.loss;
            sums[r.epoch].1 += 1;
        }
        sums.into_iter().map(|(s, n)| s / n as f64).collect()
    }

    fn append_lines<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
        let mut buf = Vec::new();
        for row in rows {
            serde_json::to_writer(&mut buf, &row).map_err(|e| Error::Serialization(e.to_string()))?;
            buf.push(b'\n');
        }
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Appends step records as JSONL.
    pub fn append_jsonl(&self, path: &Path) -> Result<()> {
        Self::append_lines(path, self.records.iter())
    }

    /// Appends `{step, wall_secs}` lines to a timing sidecar.
    pub fn append_timing(&self, path: &Path) -> Result<()> {
        Self::append_lines(
            path,
            self.records.iter().zip(&self.wall_secs).map(|(r, &wall_secs)| TimingRecord {
                step: r.step,
                wall_secs,
            }),
        )
    }
}
