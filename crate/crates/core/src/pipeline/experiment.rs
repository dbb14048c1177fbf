use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{spearman_x100, train_stage1, train_stage2, Stage, StageConfig};
use crate::bound::{format_significant, max_spearman};
use crate::data::{synth_generate, to_contrastive, FeatureTable, SynthConfig, POSITIVE_THRESHOLD};
use crate::encoder::{EncoderDims, EncoderParams};
use crate::error::{Error, Result};

pub const EXPERIMENT_CSV_HEADER: &str = "arm,test_spearman_x100,ceiling_x100,seed";

/// The three training recipes being compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Contrastive tuning on triplets only.
    Stage1Only,
    /// Stage I followed by more contrastive tuning on thresholded pairs.
    ContrastiveContinuation,
    /// Stage I followed by Pearson-loss tuning on all scored pairs.
    PearsonStage2,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Stage1Only, Arm::ContrastiveContinuation, Arm::PearsonStage2];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Stage1Only => "stage1_only",
            Arm::ContrastiveContinuation => "contrastive_continuation",
            Arm::PearsonStage2 => "pearson_stage2",
        }
    }
}

/// Everything one experiment run needs. Each entry of `seeds` overrides every
/// seed field below (dataset, initialization and batch order) for its run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub seeds: Vec<u64>,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Contrastive settings for the continuation arm.
    pub continuation: StageConfig,
    /// Pairs scoring strictly above this become continuation positives.
    pub positive_threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let stage2 = StageConfig::stage2();
        Self {
            synth: SynthConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            hidden_dim: 64,
            embed_dim: 32,
            stage1: StageConfig::stage1(),
            continuation: StageConfig {
                epochs: stage2.epochs,
                learning_rate: stage2.learning_rate,
                ..StageConfig::stage1()
            },
            stage2,
            positive_threshold: POSITIVE_THRESHOLD,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.stage1.expect_stage(Stage::I)?;
        self.continuation.expect_stage(Stage::I)?;
        self.stage2.expect_stage(Stage::II)?;
        if self.seeds.is_empty() {
            return Err(Error::invalid("experiment needs at least one seed"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::invalid("experiment seeds must be distinct"));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        Ok(())
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            input: self.synth.feature_dim,
            hidden: self.hidden_dim,
            embed: self.embed_dim,
        }
    }

    /// This configuration with every seed field set to `seed`.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.synth.seed = seed;
        c.stage1.seed = seed;
        c.stage2.seed = seed;
        c.continuation.seed = seed;
        c.seeds = vec![seed];
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub test_spearman_x100: f64,
    pub dev_spearman_x100: f64,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_triplets: usize,
    pub n_continuation_pairs: usize,
    pub ceiling_x100: f64,
    pub arms: Vec<ArmResult>,
}

impl SeedRun {
    pub fn score(&self, arm: Arm) -> f64 {
        self.arms
            .iter()
            .find(|r| r.arm == arm)
            .map(|r| r.test_spearman_x100)
            .expect("every run scores every arm")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub median_test_spearman_x100: BTreeMap<Arm, f64>,
    /// Median Pearson-arm score minus median stage-I score.
    pub median_gain_x100: f64,
    pub pearson_beats_stage1_every_seed: bool,
    pub continuation_at_most_pearson_every_seed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub runs: Vec<SeedRun>,
    pub summary: ExperimentSummary,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl ExperimentReport {
    fn new(config: ExperimentConfig, runs: Vec<SeedRun>) -> Self {
        let median_test_spearman_x100: BTreeMap<Arm, f64> = Arm::ALL
            .iter()
            .map(|&a| (a, median(runs.iter().map(|r| r.score(a)).collect())))
            .collect();
        let summary = ExperimentSummary {
            median_gain_x100: median_test_spearman_x100[&Arm::PearsonStage2]
                - median_test_spearman_x100[&Arm::Stage1Only],
            median_test_spearman_x100,
            pearson_beats_stage1_every_seed: runs
                .iter()
                .all(|r| r.score(Arm::Stage1Only) < r.score(Arm::PearsonStage2)),
            continuation_at_most_pearson_every_seed: runs
                .iter()
                .all(|r| r.score(Arm::ContrastiveContinuation) <= r.score(Arm::PearsonStage2)),
        };
        Self { config, runs, summary }
    }

    /// `arm,test_spearman_x100,ceiling_x100,seed`, one row per seed and arm.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(EXPERIMENT_CSV_HEADER);
        out.push('\n');
        for run in &self.runs {
            for r in &run.arms {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    r.arm.name(),
                    format_significant(r.test_spearman_x100, 12),
                    format_significant(run.ceiling_x100, 12),
                    run.seed
                ));
            }
        }
        out
    }
}

fn run_seed(config: &ExperimentConfig) -> Result<SeedRun> {
    let seed = config.synth.seed;
    let ds = synth_generate(&config.synth)?;
    let table = FeatureTable::new(ds.items.clone())?;
    let dev = Some(ds.dev.as_slice());
    let init = EncoderParams::init(config.encoder_dims(), seed)?;

    let (stage1, _) = train_stage1(init, &ds.triplets, &table, &config.stage1, dev)?;
    let positives = to_contrastive(&ds.train, config.positive_threshold);
    let (continued, _) = train_stage1(stage1.clone(), &positives, &table, &config.continuation, dev)?;
    let (pearson, _) = train_stage2(stage1.clone(), &ds.train, &table, &config.stage2, dev)?;

    let arms = [
        (Arm::Stage1Only, &stage1),
        (Arm::ContrastiveContinuation, &continued),
        (Arm::PearsonStage2, &pearson),
    ]
    .into_iter()
    .map(|(arm, p)| {
        Ok(ArmResult {
            arm,
            test_spearman_x100: spearman_x100(p, &table, &ds.test)?,
            dev_spearman_x100: spearman_x100(p, &table, &ds.dev)?,
            checkpoint: p.checkpoint_id(),
        })
    })
    .collect::<Result<Vec<_>>>()?;

    Ok(SeedRun {
        seed,
        n_train: ds.train.len(),
        n_test: ds.test.len(),
        n_triplets: ds.triplets.len(),
        n_continuation_pairs: positives.len(),
        ceiling_x100: 100.0 * max_spearman(ds.test.len() as u64)?,
        arms,
    })
}

/// Trains the three arms for every seed (seeds in parallel) and scores them
/// on the held-out split.
pub fn run_ceiling_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let runs = config
        .seeds
        .par_iter()
        .map(|&s| run_seed(&config.for_seed(s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport::new(config.clone(), runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig {
            synth: SynthConfig { num_items: 300, num_pairs: 1500, ..SynthConfig::default() },
            seeds: vec![3, 1],
            hidden_dim: 16,
            embed_dim: 8,
            ..ExperimentConfig::default()
        };
        c.stage1.epochs = 2;
        c.stage1.batch_size = 16;
        c.continuation.epochs = 2;
        c.continuation.batch_size = 16;
        c.stage2.epochs = 2;
        c.stage2.batch_size = 50;
        c
    }

    #[test]
    fn report_shape_and_csv() {
        let r = run_ceiling_experiment(&tiny()).unwrap();
        assert_eq!(r.runs.len(), 2);
        assert_eq!(r.runs[0].seed, 3);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], EXPERIMENT_CSV_HEADER);
        assert_eq!(lines.len(), 7);
        assert!(lines[1].starts_with("stage1_only,"));
        assert!(lines[3].starts_with("pearson_stage2,") && lines[3].ends_with(",3"));
        let ceiling = 100.0 * max_spearman(r.runs[0].n_test as u64).unwrap();
        assert!(lines[1].contains(&format_significant(ceiling, 12)));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentReport>(&json).unwrap(), r);
    }

    #[test]
    fn repeatable() {
        let a = run_ceiling_experiment(&tiny()).unwrap().to_csv();
        let b = run_ceiling_experiment(&tiny()).unwrap().to_csv();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = tiny();
        c.seeds = vec![1, 1];
        assert!(run_ceiling_experiment(&c).is_err());
        let mut c = tiny();
        c.continuation = StageConfig::stage2();
        assert!(run_ceiling_experiment(&c).is_err());
        let mut c = tiny();
        c.seeds.clear();
        assert!(run_ceiling_experiment(&c).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn toml_partial_config() {
        let text = r#"
            seeds = [7]
            [synth]
            num_items = 500
        "#;
        let c: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(c.seeds, vec![7]);
        assert_eq!(c.synth.num_items, 500);
        assert_eq!(c.synth.num_pairs, SynthConfig::default().num_pairs);
        assert_eq!(c.stage2, StageConfig::stage2());
    }
}
