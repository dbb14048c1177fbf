use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::spearman;
use crate::data::{FeatureTable, ScoredPair};
use crate::encoder::{cosine, Embedder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    /// Spearman ×100 per evaluation set.
    pub per_dataset: BTreeMap<String, f64>,
    /// Unweighted mean of `per_dataset`.
    pub average: f64,
    pub n_pairs: BTreeMap<String, usize>,
    /// Left `None` in primary artifacts; callers stamp it in sidecars.
    pub timestamp: Option<String>,
}

/// Cosine of the two embeddings of each pair, in input order.
pub fn pair_cosines<E: Embedder>(
    encoder: &E,
    features: &FeatureTable,
    pairs: &[ScoredPair],
) -> Result<Vec<f64>> {
    pairs
        .par_iter()
        .map(|p| {
            let a = encoder.embed(features.get(&p.s)?)?;
            let b = encoder.embed(features.get(&p.s_prime)?)?;
            cosine(&a, &b)
        })
        .collect()
}

pub fn spearman_x100<E: Embedder>(
    encoder: &E,
    features: &FeatureTable,
    pairs: &[ScoredPair],
) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::invalid(format!(
            "evaluation needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let cos = pair_cosines(encoder, features, pairs)?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.gs).collect();
    Ok(100.0 * spearman(&cos, &gold)?)
}

/// Spearman ×100 of cosine against gold for every named set.
pub fn evaluate<E: Embedder>(
    encoder: &E,
    checkpoint: &str,
    features: &FeatureTable,
    sets: &[(&str, &[ScoredPair])],
) -> Result<EvalReport> {
    if sets.is_empty() {
        return Err(Error::invalid("no evaluation sets given"));
    }
    let names: BTreeSet<&str> = sets.iter().map(|(n, _)| *n).collect();
    if names.len() != sets.len() {
        return Err(Error::invalid("evaluation set names must be unique"));
    }
    let mut per_dataset = BTreeMap::new();
    let mut n_pairs = BTreeMap::new();
    for (name, pairs) in sets {
        let score = spearman_x100(encoder, features, pairs)
            .map_err(|e| match e {
                Error::DegenerateInput(m) => Error::degenerate(format!("eval set {name}: {m}")),
                other => other,
            })?;
        per_dataset.insert(name.to_string(), score);
        n_pairs.insert(name.to_string(), pairs.len());
    }
    let average = per_dataset.values().sum::<f64>() / per_dataset.len() as f64;
    Ok(EvalReport {
        checkpoint: checkpoint.to_string(),
        per_dataset,
        average,
        n_pairs,
        timestamp: None,
    })
}
