//! Toy differentiable encoder standing in for a pretrained language model.
//!
//! A two-layer perceptron `x -> tanh(W1 x + b1) -> W2 h + b2` with Adam state,
//! a bit-exact binary checkpoint format, and cosine similarity with its
//! gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero vectors.
pub const MIN_NORM: f64 = 1e-12;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Anything that maps a feature vector to an embedding.
pub trait Embedder: Sync {
    fn input_dim(&self) -> usize;
    fn embed(&self, features: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            input: 32,
            hidden: 64,
            embed: 32,
        }
    }
}

impl EncoderDims {
    pub fn num_params(&self) -> usize {
        self.hidden * self.input + self.hidden + self.embed * self.hidden + self.embed
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.embed == 0 {
            return Err(Error::invalid(format!("encoder dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    // offsets into the flat parameter vector
    fn w1(&self) -> std::ops::Range<usize> {
        0..self.hidden * self.input
    }
    fn b1(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.input;
        s..s + self.hidden
    }
    fn w2(&self) -> std::ops::Range<usize> {
        let s = self.b1().end;
        s..s + self.embed * self.hidden
    }
    fn b2(&self) -> std::ops::Range<usize> {
        let s = self.w2().end;
        s..s + self.embed
    }
}

/// Adam first/second moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], learning_rate: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "shape mismatch: {} params, {} grads, optimizer holds {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {learning_rate}")));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged(format!(
                "gradient component {i} is {}",
                grads[i]
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::TrainingDiverged(format!(
                "parameter {i} became {} at step {}",
                params[i], self.step
            )));
        }
        Ok(())
    }
}

/// Gradient buffer laid out like [`EncoderParams::weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients(pub Vec<f64>);

impl ParamGradients {
    pub fn zeros(dims: EncoderDims) -> Self {
        Self(vec![0.0; dims.num_params()])
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|g| *g *= factor);
    }
}

/// Hidden activations kept from the forward pass for backprop.
#[derive(Debug, Clone)]
pub struct Activation {
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    dims: EncoderDims,
    seed: u64,
    weights: Vec<f64>,
    optimizer: AdamState,
}

impl EncoderParams {
    /// Uniform(-1/√fan_in, 1/√fan_in) weights, zero biases.
    pub fn init(dims: EncoderDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = vec![0.0; dims.num_params()];
        let a1 = 1.0 / (dims.input as f64).sqrt();
        for w in &mut weights[dims.w1()] {
            *w = rng.random_range(-a1..a1);
        }
        let a2 = 1.0 / (dims.hidden as f64).sqrt();
        for w in &mut weights[dims.w2()] {
            *w = rng.random_range(-a2..a2);
        }
        Ok(Self {
            dims,
            seed,
            optimizer: AdamState::new(weights.len()),
            weights,
        })
    }

    /// Builds parameters from an explicit flat weight vector (fresh optimizer).
    pub fn from_weights(dims: EncoderDims, seed: u64, weights: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if weights.len() != dims.num_params() {
            return Err(Error::invalid(format!(
                "expected {} weights, got {}",
                dims.num_params(),
                weights.len()
            )));
        }
        Ok(Self {
            dims,
            seed,
            optimizer: AdamState::new(weights.len()),
            weights,
        })
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn forward(&self, x: &[f64]) -> Result<Activation> {
        let d = self.dims;
        if x.len() != d.input {
            return Err(Error::invalid(format!(
                "feature dimension {} does not match encoder input {}",
                x.len(),
                d.input
            )));
        }
        let w1 = &self.weights[d.w1()];
        let b1 = &self.weights[d.b1()];
        let w2 = &self.weights[d.w2()];
        let b2 = &self.weights[d.b2()];

        let hidden: Vec<f64> = (0..d.hidden)
            .map(|h| {
                let row = &w1[h * d.input..(h + 1) * d.input];
                let pre: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b1[h];
                pre.tanh()
            })
            .collect();
        let output: Vec<f64> = (0..d.embed)
            .map(|o| {
                let row = &w2[o * d.hidden..(o + 1) * d.hidden];
                row.iter().zip(&hidden).map(|(w, v)| w * v).sum::<f64>() + b2[o]
            })
            .collect();
        Ok(Activation { hidden, output })
    }

    /// Accumulates the parameter gradient for one input given `∂L/∂output`.
    pub fn backward(
        &self,
        x: &[f64],
        act: &Activation,
        grad_output: &[f64],
        grads: &mut ParamGradients,
    ) {
        let d = self.dims;
        debug_assert_eq!(grad_output.len(), d.embed);
        let w2 = &self.weights[d.w2()];
        let g = &mut grads.0;

        let mut grad_hidden = vec![0.0; d.hidden];
        {
            let (_, rest) = g.split_at_mut(d.w2().start);
            let (gw2, gb2) = rest.split_at_mut(d.embed * d.hidden);
            for o in 0..d.embed {
                let go = grad_output[o];
                gb2[o] += go;
                let row = &w2[o * d.hidden..(o + 1) * d.hidden];
                let grow = &mut gw2[o * d.hidden..(o + 1) * d.hidden];
                for h in 0..d.hidden {
                    grow[h] += go * act.hidden[h];
                    grad_hidden[h] += go * row[h];
                }
            }
        }
        let (gw1, rest) = g.split_at_mut(d.hidden * d.input);
        let gb1 = &mut rest[..d.hidden];
        for h in 0..d.hidden {
            let th = act.hidden[h];
            let gp = grad_hidden[h] * (1.0 - th * th);
            gb1[h] += gp;
            let grow = &mut gw1[h * d.input..(h + 1) * d.input];
            for (gw, v) in grow.iter_mut().zip(x) {
                *gw += gp * v;
            }
        }
    }

    pub fn encode(&self, items: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        items.iter().map(|x| self.embed(x)).collect()
    }

    /// Adam step with the given gradient.
    pub fn apply_gradients(&mut self, grads: &ParamGradients, learning_rate: f64) -> Result<()> {
        self.optimizer.update(&mut self.weights, &grads.0, learning_rate)
    }

    /// Drops Adam moments and the step counter, keeping the weights.
    pub fn reset_optimizer(&mut self) {
        self.optimizer = AdamState::new(self.weights.len());
    }

    pub fn checkpoint_id(&self) -> String {
        let digest = Sha256::digest(self.to_checkpoint_bytes());
        hex::encode(&digest[..8])
    }
}

impl Embedder for EncoderParams {
    fn input_dim(&self) -> usize {
        self.dims.input
    }

    fn embed(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.forward(features).map(|a| a.output)
    }
}

/// A fixed linear map `x -> M x`, used as a planted reference encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProjection {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub matrix: Vec<f64>,
}

impl Embedder for LinearProjection {
    fn input_dim(&self) -> usize {
        self.cols
    }

    fn embed(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.cols {
            return Err(Error::invalid(format!(
                "feature dimension {} does not match projection width {}",
                features.len(),
                self.cols
            )));
        }
        Ok(self
            .matrix
            .chunks(self.cols)
            .map(|row| row.iter().zip(features).map(|(a, b)| a * b).sum())
            .collect())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_vectors(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "embedding dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > MIN_NORM && nb > MIN_NORM) {
        return Err(Error::degenerate(format!(
            "embedding norm below {MIN_NORM} (|a| = {na:e}, |b| = {nb:e})"
        )));
    }
    Ok((na, nb))
}

/// Cosine similarity clamped to [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = check_vectors(a, b)?;
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity together with its gradients with respect to `a` and `b`.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (na, nb) = check_vectors(a, b)?;
    let raw = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| y * inv - raw * x / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| x * inv - raw * y / (nb * nb))
        .collect();
    Ok((raw.clamp(-1.0, 1.0), ga, gb))
}

// Checkpoint layout, all integers and floats little-endian:
//
//   magic      8 bytes  "CCENCKPT"
//   version    u32
//   input      u64
//   hidden     u64
//   embed      u64
//   seed       u64
//   step       u64
//   count      u64      number of parameters P
//   weights    P × f64
//   adam_m     P × f64
//   adam_v     P × f64
//   sha256     32 bytes over everything above

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CCENCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 6 * 8;
const DIGEST_LEN: usize = 32;

impl EncoderParams {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let p = self.weights.len();
        let mut out = Vec::with_capacity(HEADER_LEN + 3 * 8 * p + DIGEST_LEN);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            self.dims.input as u64,
            self.dims.hidden as u64,
            self.dims.embed as u64,
            self.seed,
            self.optimizer.step,
            p as u64,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for arr in [&self.weights, &self.optimizer.m, &self.optimizer.v] {
            for x in arr.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: String| Err(Error::Checkpoint(msg));
        if bytes.len() < HEADER_LEN + DIGEST_LEN {
            return fail(format!("truncated checkpoint ({} bytes)", bytes.len()));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return fail("bad magic; not an encoder checkpoint".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return fail(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            ));
        }
        let mut header = [0u64; 6];
        for (i, h) in header.iter_mut().enumerate() {
            let s = 12 + i * 8;
            *h = u64::from_le_bytes(bytes[s..s + 8].try_into().expect("8 bytes"));
        }
        let [input, hidden, embed, seed, step, count] = header;
        let dims = EncoderDims {
            input: input as usize,
            hidden: hidden as usize,
            embed: embed as usize,
        };
        if dims.validate().is_err() || dims.num_params() as u64 != count {
            return fail(format!("inconsistent dimensions {dims:?} for {count} parameters"));
        }
        let p = count as usize;
        let expected = HEADER_LEN + 3 * 8 * p + DIGEST_LEN;
        if bytes.len() != expected {
            return fail(format!(
                "checkpoint length {} does not match expected {expected}",
                bytes.len()
            ));
        }
        let body = &bytes[..expected - DIGEST_LEN];
        if Sha256::digest(body).as_slice() != &bytes[expected - DIGEST_LEN..] {
            return fail("checksum mismatch; checkpoint is corrupted".into());
        }
        let read = |block: usize| -> Vec<f64> {
            let s = HEADER_LEN + block * 8 * p;
            bytes[s..s + 8 * p]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        };
        let weights = read(0);
        if weights.iter().any(|w| !w.is_finite()) {
            return fail("checkpoint contains non-finite weights".into());
        }
        Ok(Self {
            dims,
            seed,
            weights,
            optimizer: AdamState {
                m: read(1),
                v: read(2),
                step,
            },
        })
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}
