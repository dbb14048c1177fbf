use std::time::Instant;

use super::{spearman_x100, Stage, StageConfig, StepRecord, TrainingLog};
use crate::data::{BatchSchedule, FeatureTable, ScoredPair, Triplet};
use crate::encoder::{cosine_with_grad, Activation, EncoderParams, ParamGradients};
use crate::error::{Error, Result};
use crate::losses::{
    contrastive_loss_and_grad, pearson_loss_and_grad, ContrastiveBatch, NegativeTerms,
    SimilarityBatch, VarianceGuard,
};

/// Forward pass for each id, keeping what backprop needs.
fn forward_all<'a>(
    params: &EncoderParams,
    features: &'a FeatureTable,
    ids: impl Iterator<Item = &'a str>,
) -> Result<Vec<(&'a [f64], Activation)>> {
    ids.map(|id| {
        let x = features.get(id)?;
        let act = params.forward(x)?;
        // a finite output whose squared norm overflows is just as unusable
        if !act.output.iter().map(|v| v * v).sum::<f64>().is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "non-finite embedding for {id} after step {}",
                params.step()
            )));
        }
        Ok((x, act))
    })
    .collect()
}

fn outputs(acts: &[(&[f64], Activation)]) -> Vec<Vec<f64>> {
    acts.iter().map(|(_, a)| a.output.clone()).collect()
}

struct Loop<'a> {
    config: &'a StageConfig,
    features: &'a FeatureTable,
    dev: Option<&'a [ScoredPair]>,
    log: TrainingLog,
    started: Instant,
}

impl Loop<'_> {
    fn run(
        mut self,
        mut params: EncoderParams,
        len: usize,
        mut step_fn: impl FnMut(&EncoderParams, &[usize]) -> Result<(f64, ParamGradients)>,
    ) -> Result<(EncoderParams, TrainingLog)> {
        let schedule = BatchSchedule::new(len, self.config.batch_size, self.config.seed, self.config.epochs)?;
        let mut fresh = self.config.reset_optimizer;
        for batch in schedule.iter() {
            let (loss, grads) = step_fn(&params, &batch.items).map_err(|e| match e {
                Error::DegenerateInput(m) => Error::degenerate(format!(
                    "epoch {} batch {}: {m}",
                    batch.epoch, batch.index
                )),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "loss is {loss} at epoch {} batch {}",
                    batch.epoch, batch.index
                )));
            }
            if fresh {
                params.reset_optimizer();
                fresh = false;
            }
            params.apply_gradients(&grads, self.config.learning_rate)?;
            let step = params.step();
            let dev_spearman_x100 = match self.dev {
                Some(dev) if self.config.eval_every > 0 && step % self.config.eval_every as u64 == 0 => {
                    Some(spearman_x100(&params, self.features, dev)?)
                }
                _ => None,
            };
            self.log.records.push(StepRecord {
                step,
                epoch: batch.epoch,
                batch: batch.index,
                loss,
                lr: self.config.learning_rate,
                dev_spearman_x100,
            });
            self.log.wall_secs.push(self.started.elapsed().as_secs_f64());
        }
        Ok((params, self.log))
    }
}

/// Contrastive tuning on triplets.
///
/// Uses InfoNCE with hard negatives in the denominator when the triplets carry
/// them, plain in-batch InfoNCE otherwise. Mixed triplet sets are rejected.
pub fn train_stage1(
    params: EncoderParams,
    triplets: &[Triplet],
    features: &FeatureTable,
    config: &StageConfig,
    dev: Option<&[ScoredPair]>,
) -> Result<(EncoderParams, TrainingLog)> {
    config.expect_stage(Stage::I)?;
    let temperature = config.temperature.expect("validated");
    if triplets.is_empty() {
        return Err(Error::invalid("no triplets to train on"));
    }
    let with_neg = triplets.iter().filter(|t| t.hard_negative.is_some()).count();
    if with_neg != 0 && with_neg != triplets.len() {
        return Err(Error::invalid(format!(
            "{with_neg} of {} triplets carry a hard negative; use all or none",
            triplets.len()
        )));
    }
    let terms = if with_neg > 0 {
        NegativeTerms::WithHardNegatives
    } else {
        NegativeTerms::InBatch
    };
    let lp = Loop { config, features, dev, log: TrainingLog::default(), started: Instant::now() };
    lp.run(params, triplets.len(), |params, idx| {
        let batch: Vec<&Triplet> = idx.iter().map(|&i| &triplets[i]).collect();
        contrastive_step(params, features, &batch, temperature, terms)
    })
}

/// Loss and parameter gradient of one contrastive batch.
pub fn contrastive_step(
    params: &EncoderParams,
    features: &FeatureTable,
    batch: &[&Triplet],
    temperature: f64,
    terms: NegativeTerms,
) -> Result<(f64, ParamGradients)> {
    let a = forward_all(params, features, batch.iter().map(|t| t.anchor.as_str()))?;
    let p = forward_all(params, features, batch.iter().map(|t| t.positive.as_str()))?;
    let n = match terms {
        NegativeTerms::WithHardNegatives => {
            let ids = batch
                .iter()
                .map(|t| {
                    t.hard_negative.as_deref().ok_or_else(|| {
                        Error::invalid(format!("triplet anchored at {} has no hard negative", t.anchor))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(forward_all(params, features, ids.into_iter())?)
        }
        NegativeTerms::InBatch => None,
    };
    let cb = ContrastiveBatch::new(outputs(&a), outputs(&p), n.as_deref().map(outputs), temperature)?;
    let (loss, g) = contrastive_loss_and_grad(&cb, terms)?;
    let mut grads = ParamGradients::zeros(params.dims());
    let pairs = a.iter().zip(&g.anchors).chain(p.iter().zip(&g.positives));
    for ((x, act), go) in pairs {
        params.backward(x, act, go, &mut grads);
    }
    if let (Some(n), Some(gn)) = (&n, &g.hard_negatives) {
        for ((x, act), go) in n.iter().zip(gn) {
            params.backward(x, act, go, &mut grads);
        }
    }
    Ok((loss, grads))
}

/// Pearson-loss tuning on scored pairs, starting from `params` as given.
pub fn train_stage2(
    params: EncoderParams,
    pairs: &[ScoredPair],
    features: &FeatureTable,
    config: &StageConfig,
    dev: Option<&[ScoredPair]>,
) -> Result<(EncoderParams, TrainingLog)> {
    config.expect_stage(Stage::II)?;
    let lp = Loop { config, features, dev, log: TrainingLog::default(), started: Instant::now() };
    lp.run(params, pairs.len(), |params, idx| {
        let batch: Vec<&ScoredPair> = idx.iter().map(|&i| &pairs[i]).collect();
        pearson_step(params, features, &batch, config.variance_guard)
    })
}

/// Loss and parameter gradient of one Pearson-loss batch.
pub fn pearson_step(
    params: &EncoderParams,
    features: &FeatureTable,
    batch: &[&ScoredPair],
    guard: VarianceGuard,
) -> Result<(f64, ParamGradients)> {
    let dims = params.dims();
    let a = forward_all(params, features, batch.iter().map(|p| p.s.as_str()))?;
    let b = forward_all(params, features, batch.iter().map(|p| p.s_prime.as_str()))?;
    let mut cos = Vec::with_capacity(batch.len());
    let mut dcos = Vec::with_capacity(batch.len());
    for ((_, aa), (_, ab)) in a.iter().zip(&b) {
        let (c, ga, gb) = cosine_with_grad(&aa.output, &ab.output)?;
        cos.push(c);
        dcos.push((ga, gb));
    }
    let gold = batch.iter().map(|p| p.gs).collect();
    let (loss, dl) = pearson_loss_and_grad(&SimilarityBatch::new(cos, gold)?, guard)?;
    let mut grads = ParamGradients::zeros(dims);
    let mut scratch = Vec::with_capacity(dims.embed);
    for (i, w) in dl.iter().enumerate() {
        let (ga, gb) = &dcos[i];
        scratch.clear();
        scratch.extend(ga.iter().map(|g| g * w));
        params.backward(a[i].0, &a[i].1, &scratch, &mut grads);
        scratch.clear();
        scratch.extend(gb.iter().map(|g| g * w));
        params.backward(b[i].0, &b[i].1, &scratch, &mut grads);
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig, SynthDataset};
    use crate::encoder::EncoderDims;
    use crate::gradcheck::{central_difference, max_relative_error};

    fn small_ds() -> SynthDataset {
        synth_generate(&SynthConfig { num_items: 300, num_pairs: 1500, seed: 2, ..SynthConfig::default() }).unwrap()
    }

    fn init(table: &FeatureTable, seed: u64) -> EncoderParams {
        EncoderParams::init(EncoderDims { input: table.dim(), hidden: 16, embed: 8 }, seed).unwrap()
    }

    fn cfg1(epochs: usize) -> StageConfig {
        StageConfig { batch_size: 16, epochs, ..StageConfig::stage1() }
    }

    fn cfg2(epochs: usize) -> StageConfig {
        StageConfig { batch_size: 50, epochs, ..StageConfig::stage2() }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let ds = small_ds();
        let table = FeatureTable::new(ds.items.clone()).unwrap();
        let p = init(&table, 1);
        let (q, log) = train_stage1(p.clone(), &ds.triplets, &table, &cfg1(0), None).unwrap();
        assert_eq!(q.to_checkpoint_bytes(), p.to_checkpoint_bytes());
        assert!(log.records.is_empty());
        let (r, _) = train_stage2(p.clone(), &ds.train, &table, &cfg2(0), None).unwrap();
        assert_eq!(r.to_checkpoint_bytes(), p.to_checkpoint_bytes());
    }

    #[test]
    fn stage1_loss_falls_and_repeats() {
        let ds = small_ds();
        let table = FeatureTable::new(ds.items.clone()).unwrap();
        let (p1, log1) = train_stage1(init(&table, 1), &ds.triplets, &table, &cfg1(5), None).unwrap();
        let (p2, log2) = train_stage1(init(&table, 1), &ds.triplets, &table, &cfg1(5), None).unwrap();
        assert_eq!(log1.records, log2.records);
        assert_eq!(p1, p2);
        let means = log1.epoch_mean_losses();
        assert!(means.last().unwrap() < &means[0], "{means:?}");
        assert_eq!(p1.step(), log1.records.len() as u64);
    }

    #[test]
    fn stage2_improves_dev() {
        let ds = small_ds();
        let table = FeatureTable::new(ds.items.clone()).unwrap();
        let p = init(&table, 4);
        let before = spearman_x100(&p, &table, &ds.dev).unwrap();
        let cfg = StageConfig { eval_every: 10, ..cfg2(10) };
        let (q, log) = train_stage2(p, &ds.train, &table, &cfg, Some(&ds.dev)).unwrap();
        let after = spearman_x100(&q, &table, &ds.dev).unwrap();
        assert!(after > before + 10.0, "{before} -> {after}");
        assert!(log.records.iter().any(|r| r.dev_spearman_x100.is_some()));
        assert!(log.records.iter().filter(|r| r.step % 10 != 0).all(|r| r.dev_spearman_x100.is_none()));
    }

    #[test]
    fn constant_gold_names_batch() {
        let ds = small_ds();
        let table = FeatureTable::new(ds.items.clone()).unwrap();
        let flat: Vec<ScoredPair> = ds.train.iter().map(|p| ScoredPair { gs: 2.0, ..p.clone() }).collect();
        let cfg = StageConfig { variance_guard: VarianceGuard::Strict, ..cfg2(1) };
        match train_stage2(init(&table, 1), &flat, &table, &cfg, None) {
            Err(Error::DegenerateInput(m)) => assert!(m.contains("epoch 0 batch 0"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stage_mismatch_and_bad_inputs() {
        let ds = small_ds();
        let table = FeatureTable::new(ds.items.clone()).unwrap();
        let p = init(&table, 1);
        assert!(train_stage1(p.clone(), &ds.triplets, &table, &cfg2(1), None).is_err());
        assert!(train_stage2(p.clone(), &ds.train, &table, &cfg1(1), None).is_err());
        assert!(train_stage1(p.clone(), &[], &table, &cfg1(1), None).is_err());
        let mut mixed = ds.triplets.clone();
        mixed[0].hard_negative = None;
        assert!(train_stage1(p.clone(), &mixed, &table, &cfg1(1), None).is_err());
        assert!(train_stage2(p, &ds.train[..10], &table, &cfg2(1), None).is_err());
    }

    #[test]
    fn huge_learning_rate_reports_divergence_or_finishes() {
        let ds = small_ds();
        let table = FeatureTable::new(ds.items.clone()).unwrap();
        let cfg = StageConfig { learning_rate: 1e300, ..cfg2(2) };
        match train_stage2(init(&table, 1), &ds.train, &table, &cfg, None) {
            Ok((p, _)) => assert!(p.weights().iter().all(|w| w.is_finite())),
            Err(e) => assert!(e.is_numeric_failure() || matches!(e, Error::DegenerateInput(_)), "{e:?}"),
        }
    }

    fn check_step<F>(dims: EncoderDims, step: F)
    where
        F: Fn(&EncoderParams) -> Result<(f64, ParamGradients)>,
    {
        let p = EncoderParams::init(dims, 3).unwrap();
        let (_, g) = step(&p).unwrap();
        let numeric = central_difference(
            |w| step(&EncoderParams::from_weights(dims, 0, w.to_vec()).unwrap()).unwrap().0,
            p.weights(),
            1e-6,
        );
        let err = max_relative_error(&g.0, &numeric);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn step_gradients_match_numeric() {
        let ds = small_ds();
        let table = FeatureTable::new(ds.items.clone()).unwrap();
        let dims = EncoderDims { input: table.dim(), hidden: 5, embed: 4 };
        let pairs: Vec<&ScoredPair> = ds.train[..12].iter().collect();
        check_step(dims, |p| pearson_step(p, &table, &pairs, VarianceGuard::Strict));
        let trip: Vec<&Triplet> = ds.triplets[..6].iter().collect();
        check_step(dims, |p| contrastive_step(p, &table, &trip, 0.1, NegativeTerms::WithHardNegatives));
        check_step(dims, |p| contrastive_step(p, &table, &trip, 0.1, NegativeTerms::InBatch));
    }
}
