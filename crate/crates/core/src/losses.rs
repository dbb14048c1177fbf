//! Training objectives: InfoNCE with in-batch negatives, its hard-negative
//! extension, and the Pearson loss `1 - r`.
//!
//! Batch losses are means over samples. All gradients are analytic.

use crate::correlation::centered_moments;
use crate::encoder::{cosine, cosine_with_grad};
use crate::error::{Error, Result};

/// Floor on the standard deviation of the predicted cosines (training mode)
/// and minimum standard deviation required of the gold scores.
pub const VARIANCE_GUARD_EPS: f64 = 1e-8;

/// Tolerance on cosines slightly outside [-1, 1].
pub const COSINE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    anchors: Vec<Vec<f64>>,
    positives: Vec<Vec<f64>>,
    hard_negatives: Option<Vec<Vec<f64>>>,
    temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(
        anchors: Vec<Vec<f64>>,
        positives: Vec<Vec<f64>>,
        hard_negatives: Option<Vec<Vec<f64>>>,
        temperature: f64,
    ) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
        }
        let n = anchors.len();
        if n == 0 {
            return Err(Error::invalid("contrastive batch is empty"));
        }
        if positives.len() != n {
            return Err(Error::invalid(format!("{n} anchors but {} positives", positives.len())));
        }
        if let Some(neg) = &hard_negatives {
            if neg.len() != n {
                return Err(Error::invalid(format!("{n} anchors but {} hard negatives", neg.len())));
            }
        }
        let dim = anchors[0].len();
        let all = anchors
            .iter()
            .chain(&positives)
            .chain(hard_negatives.iter().flatten());
        for v in all {
            if v.len() != dim {
                return Err(Error::invalid(format!(
                    "embedding dimension mismatch: {} vs {dim}",
                    v.len()
                )));
            }
        }
        Ok(Self {
            anchors,
            positives,
            hard_negatives,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    pub fn positives(&self) -> &[Vec<f64>] {
        &self.positives
    }

    pub fn hard_negatives(&self) -> Option<&[Vec<f64>]> {
        self.hard_negatives.as_deref()
    }
}

/// Which candidates enter the InfoNCE denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeTerms {
    /// In-batch positives only.
    InBatch,
    /// In-batch positives plus every hard negative in the batch.
    WithHardNegatives,
}

/// Gradients of a contrastive loss with respect to every embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrads {
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub hard_negatives: Option<Vec<Vec<f64>>>,
}

fn candidates<'a>(batch: &'a ContrastiveBatch, terms: NegativeTerms) -> Result<Vec<&'a [f64]>> {
    let mut out: Vec<&[f64]> = batch.positives.iter().map(Vec::as_slice).collect();
    if terms == NegativeTerms::WithHardNegatives {
        let neg = batch
            .hard_negatives
            .as_ref()
            .ok_or_else(|| Error::invalid("extended InfoNCE requires hard negatives"))?;
        out.extend(neg.iter().map(Vec::as_slice));
    }
    Ok(out)
}

/// Log-sum-exp with max subtraction; returns (lse, softmax weights).
fn log_softmax(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let lse = max + total.ln();
    (lse, exps.into_iter().map(|e| e / total).collect())
}

fn contrastive(
    batch: &ContrastiveBatch,
    terms: NegativeTerms,
    want_grad: bool,
) -> Result<(f64, Option<ContrastiveGrads>)> {
    let cands = candidates(batch, terms)?;
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let inv_tau = 1.0 / batch.temperature;
    let dim = batch.anchors[0].len();

    let mut grads = want_grad.then(|| {
        (
            vec![vec![0.0; dim]; n],
            vec![vec![0.0; dim]; cands.len()],
        )
    });

    let mut total = 0.0;
    for (i, anchor) in batch.anchors.iter().enumerate() {
        let mut logits = Vec::with_capacity(cands.len());
        let mut cos_grads = Vec::new();
        for c in &cands {
            if want_grad {
                let (cos, ga, gc) = cosine_with_grad(anchor, c)?;
                logits.push(cos * inv_tau);
                cos_grads.push((ga, gc));
            } else {
                logits.push(cosine(anchor, c)? * inv_tau);
            }
        }
        let (lse, soft) = log_softmax(&logits);
        total += lse - logits[i];

        if let Some((ga_all, gc_all)) = grads.as_mut() {
            for (j, (ga, gc)) in cos_grads.iter().enumerate() {
                let target = if j == i { 1.0 } else { 0.0 };
                let coeff = (soft[j] - target) * inv_n * inv_tau;
                if coeff == 0.0 {
                    continue;
                }
                for (acc, g) in ga_all[i].iter_mut().zip(ga) {
                    *acc += coeff * g;
                }
                for (acc, g) in gc_all[j].iter_mut().zip(gc) {
                    *acc += coeff * g;
                }
            }
        }
    }
    let loss = total * inv_n;
    let grads = grads.map(|(anchors, mut cand_grads)| {
        let negs = cand_grads.split_off(n);
        ContrastiveGrads {
            anchors,
            positives: cand_grads,
            hard_negatives: (terms == NegativeTerms::WithHardNegatives).then_some(negs),
        }
    });
    Ok((loss, grads))
}

/// Mean InfoNCE over the batch using in-batch positives as negatives.
/// Any hard negatives in the batch are ignored.
pub fn info_nce(batch: &ContrastiveBatch) -> Result<f64> {
    contrastive(batch, NegativeTerms::InBatch, false).map(|(l, _)| l)
}

/// Mean InfoNCE with every hard negative added to each denominator.
pub fn info_nce_extended(batch: &ContrastiveBatch) -> Result<f64> {
    contrastive(batch, NegativeTerms::WithHardNegatives, false).map(|(l, _)| l)
}

pub fn contrastive_loss(batch: &ContrastiveBatch, terms: NegativeTerms) -> Result<f64> {
    contrastive(batch, terms, false).map(|(l, _)| l)
}

/// Loss and gradients for the chosen denominator.
pub fn contrastive_loss_and_grad(
    batch: &ContrastiveBatch,
    terms: NegativeTerms,
) -> Result<(f64, ContrastiveGrads)> {
    let (loss, grads) = contrastive(batch, terms, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

/// Gradients of the extended loss when the batch carries hard negatives,
/// of plain InfoNCE otherwise.
pub fn contrastive_grad(batch: &ContrastiveBatch) -> Result<ContrastiveGrads> {
    let terms = if batch.hard_negatives.is_some() {
        NegativeTerms::WithHardNegatives
    } else {
        NegativeTerms::InBatch
    };
    contrastive_loss_and_grad(batch, terms).map(|(_, g)| g)
}

/// Predicted cosines and gold scores for one Pearson-loss batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBatch {
    cosines: Vec<f64>,
    gold_scores: Vec<f64>,
}

impl SimilarityBatch {
    pub fn new(cosines: Vec<f64>, gold_scores: Vec<f64>) -> Result<Self> {
        if cosines.len() != gold_scores.len() {
            return Err(Error::invalid(format!(
                "{} cosines but {} gold scores",
                cosines.len(),
                gold_scores.len()
            )));
        }
        if cosines.len() < 2 {
            return Err(Error::invalid("similarity batch needs at least 2 pairs"));
        }
        if let Some(c) = cosines
            .iter()
            .find(|c| !c.is_finite() || c.abs() > 1.0 + COSINE_SLACK)
        {
            return Err(Error::invalid(format!("cosine {c} outside [-1, 1]")));
        }
        if let Some(g) = gold_scores.iter().find(|g| !g.is_finite()) {
            return Err(Error::invalid(format!("gold score {g} is not finite")));
        }
        Ok(Self {
            cosines,
            gold_scores,
        })
    }

    pub fn cosines(&self) -> &[f64] {
        &self.cosines
    }

    pub fn gold_scores(&self) -> &[f64] {
        &self.gold_scores
    }

    pub fn len(&self) -> usize {
        self.cosines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cosines.is_empty()
    }
}

/// How a near-constant prediction vector is handled by the Pearson loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceGuard {
    /// Error out with `DegenerateInput`.
    Strict,
    /// Replace σ_X by `VARIANCE_GUARD_EPS` when it falls below it.
    #[default]
    Regularized,
}

struct PearsonParts {
    r: f64,
    dx: Vec<f64>,
    dy: Vec<f64>,
    sx: f64,
    sy: f64,
    floored: bool,
}

fn pearson_parts(batch: &SimilarityBatch, guard: VarianceGuard) -> Result<PearsonParts> {
    let x = &batch.cosines;
    let y = &batch.gold_scores;
    let n = x.len() as f64;
    let m = centered_moments(x, y);
    let sy = (m.syy / n).sqrt();
    if sy < VARIANCE_GUARD_EPS {
        return Err(Error::degenerate(format!(
            "gold scores are constant (std {sy:e})"
        )));
    }
    let raw_sx = (m.sxx / n).sqrt();
    let floored = raw_sx < VARIANCE_GUARD_EPS;
    if floored && guard == VarianceGuard::Strict {
        return Err(Error::degenerate(format!(
            "predicted cosines are constant (std {raw_sx:e})"
        )));
    }
    let sx = if floored { VARIANCE_GUARD_EPS } else { raw_sx };
    let r = (m.sxy / n) / (sx * sy);
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    Ok(PearsonParts {
        r,
        dx: x.iter().map(|v| v - mx).collect(),
        dy: y.iter().map(|v| v - my).collect(),
        sx,
        sy,
        floored,
    })
}

/// `1 - r(cosines, gold)`, in [0, 2].
pub fn pearson_loss(batch: &SimilarityBatch, guard: VarianceGuard) -> Result<f64> {
    let p = pearson_parts(batch, guard)?;
    Ok((1.0 - p.r).clamp(0.0, 2.0))
}

/// `∂(1 - r)/∂cosines` under population normalization.
pub fn pearson_loss_grad(batch: &SimilarityBatch, guard: VarianceGuard) -> Result<Vec<f64>> {
    pearson_loss_and_grad(batch, guard).map(|(_, g)| g)
}

pub fn pearson_loss_and_grad(
    batch: &SimilarityBatch,
    guard: VarianceGuard,
) -> Result<(f64, Vec<f64>)> {
    let p = pearson_parts(batch, guard)?;
    let n = batch.len() as f64;
    // dr/dx_i = (1/n) [ dy_i / (sx sy) - r dx_i / sx² ]; the second term
    // vanishes when σ_X is floored to a constant.
    let a = 1.0 / (n * p.sx * p.sy);
    let b = if p.floored { 0.0 } else { p.r / (n * p.sx * p.sx) };
    let grad = p
        .dx
        .iter()
        .zip(&p.dy)
        .map(|(dx, dy)| -(a * dy - b * dx))
        .collect();
    Ok(((1.0 - p.r).clamp(0.0, 2.0), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::pearson;
    use crate::gradcheck::{central_difference, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{E, LN_2};

    fn rvec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rset(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| rvec(rng, d)).collect()
    }

    fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
        let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let aa: f64 = a.iter().map(|x| x * x).sum();
        let bb: f64 = b.iter().map(|x| x * x).sum();
        ab / (aa * bb).sqrt()
    }

    /// Direct double sum, no stabilisation.
    fn naive_info_nce(a: &[Vec<f64>], p: &[Vec<f64>], neg: Option<&[Vec<f64>]>, tau: f64) -> f64 {
        let n = a.len();
        let mut total = 0.0;
        for i in 0..n {
            let num = (naive_cos(&a[i], &p[i]) / tau).exp();
            let mut den = 0.0;
            for j in 0..n {
                den += (naive_cos(&a[i], &p[j]) / tau).exp();
                if let Some(neg) = neg {
                    den += (naive_cos(&a[i], &neg[j]) / tau).exp();
                }
            }
            total += -(num / den).ln();
        }
        total / n as f64
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let b = ContrastiveBatch::new(vec![vec![1.0, 2.0]], vec![vec![0.5, -1.0]], None, 0.05).unwrap();
        assert_eq!(info_nce(&b).unwrap(), 0.0);
        let g = contrastive_grad(&b).unwrap();
        assert!(g.anchors[0].iter().chain(&g.positives[0]).all(|&v| v == 0.0));
    }

    #[test]
    fn orthonormal_pairs_closed_form() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = ContrastiveBatch::new(a.clone(), a, None, 1.0).unwrap();
        let expected = -(E / (E + 1.0)).ln();
        assert!((info_nce(&b).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn info_nce_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = rset(&mut rng, 8, 16);
            let p = rset(&mut rng, 8, 16);
            let b = ContrastiveBatch::new(a.clone(), p.clone(), None, 1.0).unwrap();
            assert!((info_nce(&b).unwrap() - naive_info_nce(&a, &p, None, 1.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn extended_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = rset(&mut rng, 4, 8);
            let p = rset(&mut rng, 4, 8);
            let n = rset(&mut rng, 4, 8);
            let b = ContrastiveBatch::new(a.clone(), p.clone(), Some(n.clone()), 1.0).unwrap();
            let oracle = naive_info_nce(&a, &p, Some(&n), 1.0);
            assert!((info_nce_extended(&b).unwrap() - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn cloned_hard_negatives_add_log_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for tau in [0.05, 0.5, 1.0] {
            let a = rset(&mut rng, 6, 8);
            let p = rset(&mut rng, 6, 8);
            let b = ContrastiveBatch::new(a, p.clone(), Some(p), tau).unwrap();
            let diff = info_nce_extended(&b).unwrap() - info_nce(&b).unwrap();
            assert!((diff - LN_2).abs() < 1e-10);
        }
    }

    #[test]
    fn single_pair_with_hard_negative() {
        let b = ContrastiveBatch::new(
            vec![vec![1.0, 0.0]],
            vec![vec![2.0, 0.0]],
            Some(vec![vec![0.0, 3.0]]),
            1.0,
        )
        .unwrap();
        let expected = -(E / (E + 1.0)).ln();
        assert!((info_nce_extended(&b).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn in_batch_terms_ignore_hard_negatives_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rset(&mut rng, 5, 4);
        let p = rset(&mut rng, 5, 4);
        let n = rset(&mut rng, 5, 4);
        let with = ContrastiveBatch::new(a.clone(), p.clone(), Some(n), 0.1).unwrap();
        let without = ContrastiveBatch::new(a, p, None, 0.1).unwrap();
        assert_eq!(
            contrastive_loss(&with, NegativeTerms::InBatch).unwrap().to_bits(),
            info_nce(&without).unwrap().to_bits()
        );
    }

    #[test]
    fn extended_without_negatives_is_error() {
        let b = ContrastiveBatch::new(vec![vec![1.0]], vec![vec![1.0]], None, 1.0).unwrap();
        assert!(matches!(info_nce_extended(&b), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn stable_at_small_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = ContrastiveBatch::new(rset(&mut rng, 8, 4), rset(&mut rng, 8, 4), None, 1e-3).unwrap();
        let l = info_nce(&b).unwrap();
        assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn zero_norm_embedding_is_degenerate() {
        let b = ContrastiveBatch::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![vec![1.0, 1.0]; 2], None, 1.0)
            .unwrap();
        assert!(matches!(info_nce(&b), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn batch_validation() {
        assert!(ContrastiveBatch::new(vec![], vec![], None, 1.0).is_err());
        assert!(ContrastiveBatch::new(vec![vec![1.0]], vec![vec![1.0]], None, 0.0).is_err());
        assert!(ContrastiveBatch::new(vec![vec![1.0]], vec![vec![1.0, 2.0]], None, 1.0).is_err());
        assert!(ContrastiveBatch::new(vec![vec![1.0]], vec![], None, 1.0).is_err());
        assert!(SimilarityBatch::new(vec![0.5], vec![1.0]).is_err());
        assert!(SimilarityBatch::new(vec![0.5, 1.5], vec![1.0, 2.0]).is_err());
        assert!(SimilarityBatch::new(vec![0.5, 1.0 + 1e-10], vec![1.0, 2.0]).is_ok());
    }

    fn flatten(v: &[Vec<f64>]) -> Vec<f64> {
        v.iter().flatten().copied().collect()
    }

    fn unflatten(x: &[f64], n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| x[i * d..(i + 1) * d].to_vec()).collect()
    }

    #[test]
    fn contrastive_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, d, tau) = (4, 8, 0.2);
        for extended in [false, true] {
            let a = rset(&mut rng, n, d);
            let p = rset(&mut rng, n, d);
            let neg = extended.then(|| rset(&mut rng, n, d));
            let b = ContrastiveBatch::new(a.clone(), p.clone(), neg.clone(), tau).unwrap();
            let g = contrastive_grad(&b).unwrap();
            let mut x = flatten(&a);
            x.extend(flatten(&p));
            if let Some(neg) = &neg {
                x.extend(flatten(neg));
            }
            let loss = |x: &[f64]| {
                let a = unflatten(&x[..n * d], n, d);
                let p = unflatten(&x[n * d..2 * n * d], n, d);
                let neg = extended.then(|| unflatten(&x[2 * n * d..], n, d));
                let b = ContrastiveBatch::new(a, p, neg, tau).unwrap();
                if extended { info_nce_extended(&b) } else { info_nce(&b) }.unwrap()
            };
            let fd = central_difference(loss, &x, 1e-5);
            let mut analytic = flatten(&g.anchors);
            analytic.extend(flatten(&g.positives));
            if let Some(gn) = &g.hard_negatives {
                analytic.extend(flatten(gn));
            }
            assert!(max_relative_error(&analytic, &fd) < 1e-5);
        }
    }

    #[test]
    fn contrastive_grad_orthogonal_to_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rset(&mut rng, 5, 6);
        let p = rset(&mut rng, 5, 6);
        let neg = rset(&mut rng, 5, 6);
        let b = ContrastiveBatch::new(a.clone(), p.clone(), Some(neg.clone()), 0.1).unwrap();
        let g = contrastive_grad(&b).unwrap();
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
        for i in 0..5 {
            assert!(dot(&g.anchors[i], &a[i]).abs() < 1e-8);
            assert!(dot(&g.positives[i], &p[i]).abs() < 1e-8);
            assert!(dot(&g.hard_negatives.as_ref().unwrap()[i], &neg[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn pearson_loss_extremes() {
        let gold = vec![0.0, 1.5, 2.0, 4.0, 5.0];
        let aligned: Vec<f64> = gold.iter().map(|g| 0.2 * g - 0.5).collect();
        let b = SimilarityBatch::new(aligned, gold.clone()).unwrap();
        assert!(pearson_loss(&b, VarianceGuard::Strict).unwrap().abs() < 1e-15);
        let reversed: Vec<f64> = gold.iter().map(|g| 0.5 - 0.2 * g).collect();
        let b = SimilarityBatch::new(reversed, gold).unwrap();
        assert!((pearson_loss(&b, VarianceGuard::Strict).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn pearson_loss_matches_correlation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let x = rvec(&mut rng, 64);
            let y: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..5.0)).collect();
            let b = SimilarityBatch::new(x.clone(), y.clone()).unwrap();
            let l = pearson_loss(&b, VarianceGuard::Strict).unwrap();
            assert!((l - (1.0 - pearson(&x, &y).unwrap())).abs() < 1e-12);
        }
    }

    #[test]
    fn pearson_grad_at_minimum_is_zero() {
        let x = vec![-0.3, 0.1, 0.4, 0.9, -0.8];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        let g = pearson_loss_grad(&SimilarityBatch::new(x, y).unwrap(), VarianceGuard::Strict).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn pearson_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = rvec(&mut rng, 16);
            let y: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..5.0)).collect();
            let b = SimilarityBatch::new(x.clone(), y.clone()).unwrap();
            let g = pearson_loss_grad(&b, VarianceGuard::Strict).unwrap();
            assert!(g.iter().sum::<f64>().abs() < 1e-10);
            let fd = central_difference(
                |x| {
                    let b = SimilarityBatch::new(x.to_vec(), y.clone()).unwrap();
                    pearson_loss(&b, VarianceGuard::Strict).unwrap()
                },
                &x,
                1e-5,
            );
            assert!(max_relative_error(&g, &fd) < 1e-5);
        }
    }

    #[test]
    fn variance_guard_modes() {
        let flat = SimilarityBatch::new(vec![0.3; 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(matches!(
            pearson_loss(&flat, VarianceGuard::Strict),
            Err(Error::DegenerateInput(_))
        ));
        let l = pearson_loss(&flat, VarianceGuard::Regularized).unwrap();
        assert!((0.0..=2.0).contains(&l));
        let g = pearson_loss_grad(&flat, VarianceGuard::Regularized).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        assert!(g.iter().sum::<f64>().abs() < 1e-6);

        let const_gold = SimilarityBatch::new(vec![0.1, 0.2, 0.3], vec![2.0; 3]).unwrap();
        for guard in [VarianceGuard::Strict, VarianceGuard::Regularized] {
            assert!(matches!(pearson_loss(&const_gold, guard), Err(Error::DegenerateInput(_))));
        }
    }

    #[test]
    fn pearson_loss_affine_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let x = rvec(&mut rng, 20);
            let y: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..5.0)).collect();
            let base = pearson_loss(&SimilarityBatch::new(x.clone(), y.clone()).unwrap(), VarianceGuard::Strict)
                .unwrap();
            let a = rng.random_range(0.1..0.9);
            let shifted: Vec<f64> = x.iter().map(|v| a * v + 0.05).collect();
            let scaled_y: Vec<f64> = y.iter().map(|v| 3.0 * v - 7.0).collect();
            let l1 = pearson_loss(&SimilarityBatch::new(shifted, y.clone()).unwrap(), VarianceGuard::Strict)
                .unwrap();
            let l2 = pearson_loss(&SimilarityBatch::new(x.clone(), scaled_y).unwrap(), VarianceGuard::Strict)
                .unwrap();
            assert!((l1 - base).abs() < 1e-10);
            assert!((l2 - base).abs() < 1e-10);
            let neg: Vec<f64> = x.iter().map(|v| -a * v).collect();
            let l3 = pearson_loss(&SimilarityBatch::new(neg, y).unwrap(), VarianceGuard::Strict).unwrap();
            assert!((l3 - (2.0 - base)).abs() < 1e-10);
        }
    }
}
