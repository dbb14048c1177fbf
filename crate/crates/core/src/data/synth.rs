//! Seeded synthetic similarity corpus.
//!
//! Each item has a latent vector `z`. Gold scores are an affine image of
//! `cos(z_i, z_j)` on [0, 5] plus truncated Gaussian noise. Observed features
//! mix `z` through an orthonormal basis with uneven per-axis gains and pad it
//! with high-variance nuisance directions, so an untrained encoder scores near
//! zero while the exact inverse map scores perfectly.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    filter_overlap, load_items, load_pairs, load_triplets, rescale_sick, to_contrastive,
    write_items, write_pairs, write_triplets, ItemFeatures, PairFormat, ScoredPair, Triplet,
    SCORE_MAX,
};
use crate::encoder::LinearProjection;
use crate::error::{Error, Result};

pub const SOURCE_TAG: &str = "synthetic";
pub const SOURCE_TAG_SECOND_SCALE: &str = "synthetic-sick";

const MAX_NOISE_DRAWS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_items: usize,
    pub latent_dim: usize,
    /// Observed width; the `feature_dim - latent_dim` extra axes carry nuisance.
    pub feature_dim: usize,
    pub observation_noise: f64,
    pub score_noise: f64,
    pub num_pairs: usize,
    pub seed: u64,
    /// Standard deviation of the nuisance axes.
    pub nuisance_scale: f64,
    /// Ratio between the largest and smallest per-axis latent gain.
    pub mixing_spread: f64,
    pub train_fraction: f64,
    pub dev_fraction: f64,
    pub positive_threshold: f64,
    pub negative_threshold: f64,
    /// Share of pairs scored on a [1, 5] scale and rescaled afterwards.
    pub second_scale_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_items: 2000,
            latent_dim: 8,
            feature_dim: 32,
            observation_noise: 0.1,
            score_noise: 0.4,
            num_pairs: 12_000,
            seed: 0,
            nuisance_scale: 4.0,
            mixing_spread: 4.0,
            train_fraction: 0.7,
            dev_fraction: 0.15,
            positive_threshold: super::POSITIVE_THRESHOLD,
            negative_threshold: 1.0,
            second_scale_fraction: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.latent_dim < 2 || self.feature_dim < 2 {
            return bad(format!(
                "latent_dim and feature_dim must be at least 2 (got {} and {})",
                self.latent_dim, self.feature_dim
            ));
        }
        if self.feature_dim < self.latent_dim {
            return bad(format!(
                "feature_dim {} is smaller than latent_dim {}",
                self.feature_dim, self.latent_dim
            ));
        }
        if self.num_items < 2 || self.num_pairs < 2 {
            return bad(format!(
                "need at least 2 items and 2 pairs (got {} and {})",
                self.num_items, self.num_pairs
            ));
        }
        let max_pairs = self.num_items * (self.num_items - 1) / 2;
        if self.num_pairs > max_pairs / 2 {
            return bad(format!(
                "{} pairs requested but {} items only allow {} distinct pairs; \
                 keep it under half of that",
                self.num_pairs, self.num_items, max_pairs
            ));
        }
        for (name, v) in [
            ("observation_noise", self.observation_noise),
            ("score_noise", self.score_noise),
            ("nuisance_scale", self.nuisance_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.mixing_spread.is_finite() && self.mixing_spread >= 1.0) {
            return bad(format!("mixing_spread must be >= 1, got {}", self.mixing_spread));
        }
        let (tf, df) = (self.train_fraction, self.dev_fraction);
        if !(tf > 0.0 && df >= 0.0 && tf + df < 1.0) {
            return bad(format!("split fractions train={tf} dev={df} leave no test set"));
        }
        if !(0.0..=1.0).contains(&self.second_scale_fraction) {
            return bad(format!(
                "second_scale_fraction must lie in [0, 1], got {}",
                self.second_scale_fraction
            ));
        }
        let (lo, hi) = (self.negative_threshold, self.positive_threshold);
        if !(0.0..=SCORE_MAX).contains(&hi) || !(0.0..=SCORE_MAX).contains(&lo) || lo >= hi {
            return bad(format!("thresholds must satisfy 0 <= negative {lo} < positive {hi} <= 5"));
        }
        Ok(())
    }
}

/// A generated corpus plus the map that recovers its latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub items: Vec<ItemFeatures>,
    pub train: Vec<ScoredPair>,
    pub dev: Vec<ScoredPair>,
    pub test: Vec<ScoredPair>,
    pub triplets: Vec<Triplet>,
    /// Inverse of the generating mix: features to latent `z` when noiseless.
    pub oracle: LinearProjection,
}

impl SynthDataset {
    pub fn num_pairs(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn splits(&self) -> [(&'static str, &[ScoredPair]); 3] {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
    }
}

pub fn item_id(i: usize) -> String {
    format!("item-{i:05}")
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

/// `dim` orthonormal vectors of length `dim` by modified Gram-Schmidt.
fn random_orthonormal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v = gaussian_vec(rng, dim);
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = dot(&v, &v).sqrt();
        // a near-dependent draw is astronomically unlikely; just redraw
        if n > 1e-6 {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Gold score with noise, redrawn until it lands in [lo, hi].
fn noisy_score(rng: &mut ChaCha8Rng, clean: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    if sigma == 0.0 {
        return clean.clamp(lo, hi);
    }
    for _ in 0..MAX_NOISE_DRAWS {
        let g = clean + sigma * rng.sample::<f64, _>(StandardNormal);
        if (lo..=hi).contains(&g) {
            return g;
        }
    }
    clean.clamp(lo, hi)
}

pub fn synth_generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);

    let basis = random_orthonormal(&mut rng, c.feature_dim);
    let gains: Vec<f64> = (0..c.latent_dim)
        .map(|k| c.mixing_spread.powf(k as f64 / (c.latent_dim - 1) as f64 - 0.5))
        .collect();

    let latents: Vec<Vec<f64>> = (0..c.num_items).map(|_| gaussian_vec(&mut rng, c.latent_dim)).collect();
    let items: Vec<ItemFeatures> = latents
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let mut x = vec![0.0; c.feature_dim];
            for (k, zk) in z.iter().enumerate() {
                let a = gains[k] * zk;
                x.iter_mut().zip(&basis[k]).for_each(|(xi, q)| *xi += a * q);
            }
            for q in &basis[c.latent_dim..] {
                let a = c.nuisance_scale * rng.sample::<f64, _>(StandardNormal);
                x.iter_mut().zip(q).for_each(|(xi, qi)| *xi += a * qi);
            }
            if c.observation_noise > 0.0 {
                for xi in &mut x {
                    *xi += c.observation_noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            ItemFeatures { id: item_id(i), features: x }
        })
        .collect();

    let oracle = LinearProjection {
        rows: c.latent_dim,
        cols: c.feature_dim,
        matrix: (0..c.latent_dim)
            .flat_map(|k| basis[k].iter().map(|q| q / gains[k]).collect::<Vec<_>>())
            .collect(),
    };

    // pairs: pick an item and a target cosine, take the partner closest to it
    let units: Vec<Vec<f64>> = latents.iter().map(|z| unit(z)).collect();
    let mut seen: HashSet<(usize, usize)> = HashSet::with_capacity(c.num_pairs);
    let mut pairs: Vec<ScoredPair> = Vec::with_capacity(c.num_pairs);
    let max_attempts = c.num_pairs * 20;
    let mut attempts = 0;
    while pairs.len() < c.num_pairs {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Generation(format!(
                "found only {} distinct pairs after {max_attempts} draws (wanted {}); \
                 increase num_items",
                pairs.len(),
                c.num_pairs
            )));
        }
        let i = rng.random_range(0..c.num_items);
        let target: f64 = rng.random_range(-1.0..1.0);
        let mut best: Option<(f64, usize, f64)> = None;
        for (j, uj) in units.iter().enumerate() {
            if j == i || seen.contains(&(i.min(j), i.max(j))) {
                continue;
            }
            let cos = dot(&units[i], uj);
            let gap = (cos - target).abs();
            if best.is_none_or(|(g, _, _)| gap < g) {
                best = Some((gap, j, cos));
            }
        }
        let Some((_, j, cos)) = best else { continue };
        seen.insert((i.min(j), i.max(j)));
        let (a, b) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
        let pair = if rng.random_bool(c.second_scale_fraction) {
            let label = noisy_score(
                &mut rng,
                1.0 + 4.0 * ((1.0 + cos) / 2.0).powf(1.5),
                c.score_noise * 4.0 / SCORE_MAX,
                1.0,
                5.0,
            );
            ScoredPair::new(item_id(a), item_id(b), rescale_sick(label)?)
                .with_source(SOURCE_TAG_SECOND_SCALE)
        } else {
            let clean = SCORE_MAX / 2.0 * (1.0 + cos);
            ScoredPair::new(item_id(a), item_id(b), noisy_score(&mut rng, clean, c.score_noise, 0.0, SCORE_MAX))
                .with_source(SOURCE_TAG)
        };
        pairs.push(pair);
    }

    pairs.shuffle(&mut rng);
    let n_train = ((c.num_pairs as f64) * c.train_fraction).round() as usize;
    let n_dev = ((c.num_pairs as f64) * c.dev_fraction).round() as usize;
    let n_test = c.num_pairs.saturating_sub(n_train + n_dev);
    if n_train < 2 || n_test < 2 || (n_dev < 2 && c.dev_fraction > 0.0) {
        return Err(Error::Generation(format!(
            "{} pairs are too few to split {}/{}",
            c.num_pairs, c.train_fraction, c.dev_fraction
        )));
    }
    let test = pairs.split_off(n_train + n_dev);
    let dev = pairs.split_off(n_train);
    let (train, removed) = filter_overlap(&pairs, &[&dev, &test]);
    if !removed.is_empty() {
        return Err(Error::Generation(format!(
            "{} train pairs overlap dev/test despite deduplication",
            removed.len()
        )));
    }

    let triplets = build_triplets(&train, c, &mut rng)?;

    Ok(SynthDataset {
        config: c.clone(),
        items,
        train,
        dev,
        test,
        triplets,
        oracle,
    })
}

/// Positives above the threshold, each with a hard negative taken from a
/// low-scoring pair that shares the anchor (or failing that, the positive).
fn build_triplets(train: &[ScoredPair], c: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Triplet>> {
    let low: Vec<&ScoredPair> = train.iter().filter(|p| p.gs < c.negative_threshold).collect();
    let mut positives = to_contrastive(train, c.positive_threshold);
    if positives.is_empty() || low.is_empty() {
        return Err(Error::Generation(format!(
            "train split has {} pairs above {} and {} below {}; both must be non-empty \
             (raise num_pairs or lower score_noise)",
            positives.len(),
            c.positive_threshold,
            low.len(),
            c.negative_threshold
        )));
    }
    let mut partners: HashMap<&str, Vec<&str>> = HashMap::new();
    for p in &low {
        partners.entry(&p.s).or_default().push(&p.s_prime);
        partners.entry(&p.s_prime).or_default().push(&p.s);
    }
    for t in &mut positives {
        let pool = partners.get(t.anchor.as_str()).or_else(|| partners.get(t.positive.as_str()));
        let neg = match pool {
            Some(p) => p[rng.random_range(0..p.len())],
            None => {
                let p = low[rng.random_range(0..low.len())];
                if rng.random_bool(0.5) { &p.s } else { &p.s_prime }
            }
        };
        t.hard_negative = Some(neg.to_string());
    }
    Ok(positives)
}

pub const ITEMS_FILE: &str = "items.jsonl";
pub const TRIPLETS_FILE: &str = "triplets.jsonl";
pub const ORACLE_FILE: &str = "oracle.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub seed: u64,
    pub counts: BTreeMap<String, usize>,
    /// SHA-256 of every data file, keyed by file name.
    pub checksums: BTreeMap<String, String>,
}

fn split_file(name: &str) -> String {
    format!("{name}.jsonl")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Serialization(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl SynthDataset {
    /// Writes the dataset as JSONL files plus `oracle.json` and a manifest.
    pub fn write_dir(&self, dir: &Path) -> Result<SynthManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut counts = BTreeMap::new();
        let mut files = vec![ITEMS_FILE.to_string(), TRIPLETS_FILE.to_string(), ORACLE_FILE.to_string()];
        write_items(&dir.join(ITEMS_FILE), &self.items)?;
        counts.insert("items".to_string(), self.items.len());
        for (name, pairs) in self.splits() {
            let file = split_file(name);
            write_pairs(&dir.join(&file), pairs, PairFormat::Jsonl)?;
            counts.insert(name.to_string(), pairs.len());
            files.push(file);
        }
        write_triplets(&dir.join(TRIPLETS_FILE), &self.triplets)?;
        counts.insert("triplets".to_string(), self.triplets.len());
        write_json(&dir.join(ORACLE_FILE), &self.oracle)?;

        files.sort();
        let checksums = files
            .into_iter()
            .map(|f| sha256_file(&dir.join(&f)).map(|h| (f, h)))
            .collect::<Result<_>>()?;
        let manifest = SynthManifest {
            config: self.config.clone(),
            seed: self.config.seed,
            counts,
            checksums,
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }

    /// Reads a directory written by [`SynthDataset::write_dir`], verifying checksums.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest: SynthManifest = read_json(&dir.join(MANIFEST_FILE))?;
        for (file, want) in &manifest.checksums {
            let got = sha256_file(&dir.join(file))?;
            if &got != want {
                return Err(Error::invalid(format!(
                    "{} checksum mismatch: manifest says {want}, file hashes to {got}",
                    dir.join(file).display()
                )));
            }
        }
        let split = |name: &str| load_pairs(&dir.join(split_file(name)), PairFormat::Jsonl);
        Ok(Self {
            config: manifest.config,
            items: load_items(&dir.join(ITEMS_FILE))?,
            train: split("train")?,
            dev: split("dev")?,
            test: split("test")?,
            triplets: load_triplets(&dir.join(TRIPLETS_FILE))?,
            oracle: read_json(&dir.join(ORACLE_FILE))?,
        })
    }
}
