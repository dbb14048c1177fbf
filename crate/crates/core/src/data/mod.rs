//! Scored text pairs, triplets, overlap filtering and batching.

mod io;
pub mod synth;

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub use io::{
    load_items, load_pairs, load_triplets, write_items, write_pairs, write_triplets, PairFormat,
};
pub use synth::{synth_generate, SynthConfig, SynthDataset};

/// Default cut for turning fine-grained scores into contrastive positives.
pub const POSITIVE_THRESHOLD: f64 = 4.0;

/// Upper end of the normalized annotation scale.
pub const SCORE_MAX: f64 = 5.0;

/// Two texts and a human similarity score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub s: String,
    pub s_prime: String,
    pub gs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl ScoredPair {
    pub fn new(s: impl Into<String>, s_prime: impl Into<String>, gs: f64) -> Self {
        Self {
            s: s.into(),
            s_prime: s_prime.into(),
            gs,
            source: None,
        }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }
}

/// Anchor, positive and optional hard negative for contrastive training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_negative: Option<String>,
}

/// An item's synthetic feature vector, standing in for its text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFeatures {
    pub id: String,
    pub features: Vec<f64>,
}

/// Lookup from item id to features.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    index: HashMap<String, usize>,
    items: Vec<ItemFeatures>,
    dim: usize,
}

impl FeatureTable {
    pub fn new(items: Vec<ItemFeatures>) -> Result<Self> {
        let dim = items.first().map_or(0, |i| i.features.len());
        let mut index = HashMap::with_capacity(items.len());
        for (pos, item) in items.iter().enumerate() {
            if item.features.len() != dim {
                return Err(Error::invalid(format!(
                    "item {} has {} features, expected {dim}",
                    item.id,
                    item.features.len()
                )));
            }
            if index.insert(item.id.clone(), pos).is_some() {
                return Err(Error::invalid(format!("duplicate item id {}", item.id)));
            }
        }
        Ok(Self { index, items, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[ItemFeatures] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Result<&[f64]> {
        self.index
            .get(id)
            .map(|&i| self.items[i].features.as_slice())
            .ok_or_else(|| Error::invalid(format!("unknown item id {id:?}")))
    }
}

/// The form in which texts are compared for overlap: NFC, trimmed.
pub fn normalize_text(s: &str) -> String {
    s.trim().nfc().collect()
}

/// Removes every train pair that matches some test pair in either order.
/// Scores are ignored. Returns `(kept, removed)`, both in input order.
pub fn filter_overlap(
    train: &[ScoredPair],
    test_sets: &[&[ScoredPair]],
) -> (Vec<ScoredPair>, Vec<ScoredPair>) {
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for set in test_sets {
        for p in set.iter() {
            seen.insert((normalize_text(&p.s), normalize_text(&p.s_prime)));
        }
    }
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for p in train {
        let a = normalize_text(&p.s);
        let b = normalize_text(&p.s_prime);
        // (s1 = s2 ∧ s1' = s2') ∨ (s1 = s2' ∧ s1' = s2)
        let hit = seen.contains(&(a.clone(), b.clone())) || seen.contains(&(b, a));
        if hit {
            removed.push(p.clone());
        } else {
            kept.push(p.clone());
        }
    }
    (kept, removed)
}

/// Maps a SICK-R relatedness label from [1, 5] onto [0, 5].
pub fn rescale_sick(label: f64) -> Result<f64> {
    if !(1.0..=5.0).contains(&label) {
        return Err(Error::invalid(format!("SICK label {label} outside [1, 5]")));
    }
    Ok(5.0 * (label - 1.0) / 4.0)
}

/// Anchor/positive triplets for every pair scoring strictly above `threshold`.
pub fn to_contrastive(pairs: &[ScoredPair], threshold: f64) -> Vec<Triplet> {
    pairs
        .iter()
        .filter(|p| p.gs > threshold)
        .map(|p| Triplet {
            anchor: p.s.clone(),
            positive: p.s_prime.clone(),
            hard_negative: None,
        })
        .collect()
}

/// One group of dataset indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub epoch: usize,
    pub index: usize,
    pub items: Vec<usize>,
}

/// Seeded shuffle-and-partition over a dataset of `len` entries.
///
/// Every epoch draws its own permutation from the ChaCha stream `epoch` of
/// `seed`, so epochs are independent of each other and of how many batches
/// were consumed before.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    len: usize,
    batch_size: usize,
    seed: u64,
    epochs: usize,
    drop_last: bool,
}

impl BatchSchedule {
    pub fn new(len: usize, batch_size: usize, seed: u64, epochs: usize) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::invalid(format!("batch size must be at least 2, got {batch_size}")));
        }
        if len < batch_size {
            return Err(Error::invalid(format!(
                "dataset of {len} entries is smaller than batch size {batch_size}"
            )));
        }
        Ok(Self {
            len,
            batch_size,
            seed,
            epochs,
            drop_last: true,
        })
    }

    /// Keep the short final group instead of dropping it.
    pub fn keep_last(mut self) -> Self {
        self.drop_last = false;
        self
    }

    pub fn batches_per_epoch(&self) -> usize {
        if self.drop_last {
            self.len / self.batch_size
        } else {
            self.len.div_ceil(self.batch_size)
        }
    }

    pub fn permutation(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Batch> {
        let order = self.permutation(epoch);
        let per = self.batches_per_epoch();
        order
            .chunks(self.batch_size)
            .take(per)
            .enumerate()
            .map(|(index, chunk)| Batch {
                epoch,
                index,
                items: chunk.to_vec(),
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = Batch> + '_ {
        (0..self.epochs).flat_map(move |e| self.epoch(e))
    }
}

/// Seeded batches over `len` entries; the short remainder of each epoch is
/// dropped.
pub fn make_batches(len: usize, batch_size: usize, seed: u64, epochs: usize) -> Result<Vec<Batch>> {
    Ok(BatchSchedule::new(len, batch_size, seed, epochs)?.iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(a: &str, b: &str, gs: f64) -> ScoredPair {
        ScoredPair::new(a, b, gs)
    }

    #[test]
    fn reversed_pair_is_a_duplicate() {
        let train = vec![p("a", "b", 3.0)];
        let test = vec![p("b", "a", 1.0)];
        let (kept, removed) = filter_overlap(&train, &[&test]);
        assert!(kept.is_empty());
        assert_eq!(removed, train);
    }

    #[test]
    fn partial_match_is_kept() {
        let train = vec![p("a", "b", 3.0)];
        let test = vec![p("a", "c", 3.0)];
        let (kept, removed) = filter_overlap(&train, &[&test]);
        assert_eq!(kept, train);
        assert!(removed.is_empty());
    }

    #[test]
    fn filter_normalizes_whitespace_and_unicode() {
        // "é" precomposed vs decomposed
        let train = vec![p("caf\u{e9} ", "x", 1.0), p("Cafe", "x", 1.0)];
        let test = vec![p("  cafe\u{301}", "x", 4.0)];
        let (kept, removed) = filter_overlap(&train, &[&test]);
        assert_eq!(removed.len(), 1);
        assert_eq!(kept, vec![p("Cafe", "x", 1.0)]);
    }

    #[test]
    fn filter_preserves_order_across_sets() {
        let train: Vec<_> = (0..6).map(|i| p(&format!("s{i}"), &format!("t{i}"), 1.0)).collect();
        let t1 = vec![p("t1", "s1", 0.0)];
        let t2 = vec![p("s4", "t4", 0.0)];
        let (kept, removed) = filter_overlap(&train, &[&t1, &t2]);
        let ids: Vec<_> = kept.iter().map(|p| p.s.as_str()).collect();
        assert_eq!(ids, ["s0", "s2", "s3", "s5"]);
        assert_eq!(removed.len(), 2);
    }

    #[test]
    fn sick_rescale() {
        assert_eq!(rescale_sick(1.0).unwrap(), 0.0);
        assert_eq!(rescale_sick(5.0).unwrap(), 5.0);
        assert_eq!(rescale_sick(3.0).unwrap(), 2.5);
        assert!(rescale_sick(0.5).is_err());
        assert!(rescale_sick(5.01).is_err());
        assert!(rescale_sick(f64::NAN).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let pairs = vec![p("a", "b", 4.5), p("c", "d", 4.0), p("e", "f", 1.0)];
        let t = to_contrastive(&pairs, 4.0);
        assert_eq!(
            t,
            vec![Triplet {
                anchor: "a".into(),
                positive: "b".into(),
                hard_negative: None
            }]
        );
    }

    #[test]
    fn batch_arithmetic() {
        let b = make_batches(10, 4, 0, 1).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|b| b.items.len() == 4));
        let all: HashSet<usize> = b.iter().flat_map(|b| b.items.clone()).collect();
        assert_eq!(all.len(), 8);
        let kept = BatchSchedule::new(10, 4, 0, 1).unwrap().keep_last();
        assert_eq!(kept.iter().count(), 3);
    }

    #[test]
    fn batches_are_deterministic() {
        assert_eq!(make_batches(50, 8, 7, 3).unwrap(), make_batches(50, 8, 7, 3).unwrap());
    }

    #[test]
    fn epochs_are_independent_shuffles() {
        let s = BatchSchedule::new(50, 5, 7, 2).unwrap();
        assert_ne!(s.permutation(0), s.permutation(1));
    }

    #[test]
    fn different_seeds_differ() {
        let mut same = 0;
        for seed in 0..100u64 {
            let a = BatchSchedule::new(100, 10, seed, 1).unwrap().permutation(0);
            let b = BatchSchedule::new(100, 10, seed + 1000, 1).unwrap().permutation(0);
            same += (a == b) as usize;
        }
        assert_eq!(same, 0);
    }

    #[test]
    fn batch_errors() {
        assert!(make_batches(3, 4, 0, 1).is_err());
        assert!(make_batches(10, 1, 0, 1).is_err());
    }

    #[test]
    fn feature_table_lookup() {
        let t = FeatureTable::new(vec![
            ItemFeatures { id: "a".into(), features: vec![1.0, 2.0] },
            ItemFeatures { id: "b".into(), features: vec![3.0, 4.0] },
        ])
        .unwrap();
        assert_eq!(t.get("b").unwrap(), &[3.0, 4.0]);
        assert!(t.get("c").is_err());
        assert!(FeatureTable::new(vec![
            ItemFeatures { id: "a".into(), features: vec![1.0] },
            ItemFeatures { id: "a".into(), features: vec![1.0] },
        ])
        .is_err());
    }

    fn pair_strategy() -> impl Strategy<Value = ScoredPair> {
        ("[a-d]", "[a-d]", 0.0..5.0f64).prop_map(|(a, b, g)| ScoredPair::new(a, b, g))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn filtering_is_idempotent(
            train in prop::collection::vec(pair_strategy(), 0..30),
            test in prop::collection::vec(pair_strategy(), 0..10),
        ) {
            let (kept, _) = filter_overlap(&train, &[&test]);
            let (kept2, removed2) = filter_overlap(&kept, &[&test]);
            prop_assert_eq!(&kept2, &kept);
            prop_assert!(removed2.is_empty());
        }

        #[test]
        fn contrastive_size_monotone(
            pairs in prop::collection::vec(pair_strategy(), 0..40),
            t1 in 0.0..5.0f64,
            t2 in 0.0..5.0f64,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(to_contrastive(&pairs, hi).len() <= to_contrastive(&pairs, lo).len());
        }

        #[test]
        fn rescale_monotone(a in 1.0..5.0f64, b in 1.0..5.0f64) {
            prop_assume!(a < b);
            prop_assert!(rescale_sick(a).unwrap() < rescale_sick(b).unwrap());
        }
    }
}
