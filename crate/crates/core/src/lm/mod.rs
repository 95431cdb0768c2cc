//! A small frozen decoder-only transformer.
//!
//! Pre-norm RMSNorm blocks, multi-head attention with rotary position
//! encoding, a SiLU feed-forward, and an untied LM head applied directly to
//! the last residual stream (no final norm, so the captured top-level hidden
//! state times the head reproduces the logits).
//!
//! All arithmetic is `f32` with fixed, ascending reduction order. Logits at a
//! position are a pure function of that position's input embedding, position
//! id, and ordered attended set.

mod cache;
mod forward;
mod mask;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use cache::KvCache;
pub use forward::{ForwardRequest, ForwardResult};
pub use mask::AttentionMask;

use crate::error::{EspError, Result};

pub type TokenId = u32;

pub(crate) const RMS_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub rope_base: f32,
    pub seed: u64,
}

impl ModelConfig {
    /// The default toy scale: V=256, d=64, L=4, H=4, ffn=256.
    pub fn toy(seed: u64) -> Self {
        ModelConfig {
            vocab_size: 256,
            model_dim: 64,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 256,
            rope_base: 10_000.0,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EspError::InvalidConfig(msg));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.num_layers < 1 {
            return bad("num_layers must be >= 1".into());
        }
        if self.num_heads < 1 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head_dim {} must be even for rotary encoding", self.head_dim()));
        }
        if self.ffn_dim < self.model_dim {
            return bad(format!(
                "ffn_dim {} must be >= model_dim {}",
                self.ffn_dim, self.model_dim
            ));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return bad(format!("rope_base must be positive, got {}", self.rope_base));
        }
        if u32::try_from(self.vocab_size).is_err()
            || u32::try_from(self.ffn_dim).is_err()
            || u32::try_from(self.model_dim).is_err()
        {
            return bad("dimensions must fit in u32".into());
        }
        Ok(())
    }
}

/// Weights of one transformer block. Matrices are row-major `[in][out]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub ffn_norm: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

impl LayerWeights {
    fn zeros(d: usize, ffn: usize) -> Self {
        LayerWeights {
            attn_norm: vec![1.0; d],
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            ffn_norm: vec![1.0; d],
            w_up: vec![0.0; d * ffn],
            w_down: vec![0.0; ffn * d],
        }
    }

    pub(crate) fn tensors(&self) -> [&[f32]; 8] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_up,
            &self.w_down,
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Vec<f32>; 8] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// Immutable model weights. Shareable across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModel {
    config: ModelConfig,
    /// `V x d`, row `v` is the embedding of token `v`.
    embedding: Vec<f32>,
    layers: Vec<LayerWeights>,
    /// `d x V`, column `r` is `w_r`.
    lm_head: Vec<f32>,
}

impl FrozenModel {
    pub(crate) fn zeros(config: ModelConfig) -> Self {
        let (v, d, ffn) = (config.vocab_size, config.model_dim, config.ffn_dim);
        FrozenModel {
            config,
            embedding: vec![0.0; v * d],
            layers: (0..config.num_layers).map(|_| LayerWeights::zeros(d, ffn)).collect(),
            lm_head: vec![0.0; d * v],
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    /// The `V x d` embedding table, row-major.
    pub fn embedding_table(&self) -> &[f32] {
        &self.embedding
    }

    /// The `d x V` LM head, row-major.
    pub fn lm_head(&self) -> &[f32] {
        &self.lm_head
    }

    /// Column `r` of the LM head as a fresh vector.
    pub fn head_column(&self, r: usize) -> Vec<f32> {
        let v = self.config.vocab_size;
        (0..self.config.model_dim).map(|i| self.lm_head[i * v + r]).collect()
    }

    pub fn embed(&self, token: TokenId) -> Result<&[f32]> {
        let v = self.config.vocab_size;
        let t = token as usize;
        if t >= v {
            return Err(EspError::TokenOutOfRange { token, vocab: v });
        }
        let d = self.config.model_dim;
        Ok(&self.embedding[t * d..(t + 1) * d])
    }

    /// Embeddings for a token sequence, flattened `n x d`.
    pub fn embed_all(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(tokens.len() * self.config.model_dim);
        for &t in tokens {
            out.extend_from_slice(self.embed(t)?);
        }
        Ok(out)
    }

    /// Logits `W^T h` for one final hidden state.
    pub fn project(&self, hidden: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0f32; self.config.vocab_size];
        forward::matvec_into(hidden, &self.lm_head, self.config.vocab_size, &mut out);
        out
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.config.num_layers, self.config.model_dim)
    }

    /// Tensors in serialization order: embedding, then per layer
    /// `attn_norm, wq, wk, wv, wo, ffn_norm, w_up, w_down`, then the LM head.
    pub(crate) fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.embedding];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.lm_head);
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out: Vec<&mut Vec<f32>> = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lm_head);
        out
    }
}

/// Draw a model from a seeded ChaCha8 stream.
///
/// Draw order: embedding (`N(0,1)`, row-major), then per layer `wq, wk, wv,
/// wo, w_up` (`N(0, 1/d)`) and `w_down` (`N(0, 1/ffn)`), then the LM head
/// (`N(0, 1/d)`). Norm gains are fixed at 1 and consume no draws.
pub fn build_random_model(config: ModelConfig) -> Result<FrozenModel> {
    config.validate()?;
    let mut model = FrozenModel::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.model_dim as f32;
    let ffn = config.ffn_dim as f32;
    let fill = |buf: &mut [f32], std: f32, rng: &mut ChaCha8Rng| {
        let dist = Normal::new(0.0f32, std).expect("finite std");
        for w in buf.iter_mut() {
            *w = dist.sample(rng);
        }
    };
    fill(&mut model.embedding, 1.0, &mut rng);
    let proj_std = 1.0 / d.sqrt();
    for layer in &mut model.layers {
        fill(&mut layer.wq, proj_std, &mut rng);
        fill(&mut layer.wk, proj_std, &mut rng);
        fill(&mut layer.wv, proj_std, &mut rng);
        fill(&mut layer.wo, proj_std, &mut rng);
        fill(&mut layer.w_up, proj_std, &mut rng);
        fill(&mut layer.w_down, 1.0 / ffn.sqrt(), &mut rng);
    }
    fill(&mut model.lm_head, proj_std, &mut rng);
    Ok(model)
}

/// Furthest position offset for which the successor model's
/// previous-position attention is guaranteed sharp.
pub const SUCCESSOR_MAX_POSITION: usize = 4096;

/// Minimum attention-score gap between the previous position and any other
/// attended position in the successor model.
const SUCCESSOR_SCORE_GAP: f64 = 80.0;

/// Value of the two constant embedding dimensions in the successor model.
const SUCCESSOR_CONST: f64 = 8.0;

/// Hand-built one-layer model over a successor chain `x -> x + stride (mod V)`.
///
/// Layout of the residual stream (`d = 2V + 2`, one head):
/// - dims `[0, V)`: one-hot token embedding,
/// - dims `[V, 2V)`: attention output (one-hot of the attended token),
/// - dims `2V, 2V+1`: a large constant that drives the rotary query/key
///   and keeps the RMS of any convex mix of embeddings close to a token's.
///
/// The query/key are constant vectors whose rotary score peaks exactly at
/// relative offset one, so each position hard-attends the position id just
/// before it. The head maps an attended token `v` to the logit for
/// `v + 2*stride`. On a chain, the token at position `p` attends `x_{p-1}`
/// and predicts `x_{p-1} + 2s = x_p + s`; a mask placed after `x_p` attends
/// `x_p` and predicts `x_{p+2}`. The feed-forward is all zeros.
pub fn build_successor_model(vocab_size: usize, stride: usize) -> Result<FrozenModel> {
    if stride < 1 || stride >= vocab_size {
        return Err(EspError::InvalidConfig(format!(
            "stride must satisfy 1 <= stride < V, got stride={stride}, V={vocab_size}"
        )));
    }
    let v = vocab_size;
    let d = 2 * v + 2;
    let config = ModelConfig {
        vocab_size: v,
        model_dim: d,
        num_layers: 1,
        num_heads: 1,
        ffn_dim: d,
        rope_base: 10_000.0,
        seed: 0,
    };
    config.validate()?;
    let mut model = FrozenModel::zeros(config);
    let c0 = 2 * v;
    for t in 0..v {
        let row = &mut model.embedding[t * d..(t + 1) * d];
        row[t] = 1.0;
        row[c0] = SUCCESSOR_CONST as f32;
        row[c0 + 1] = SUCCESSOR_CONST as f32;
    }

    // Convex mixes of rows have a smaller one-hot norm and so a slightly
    // larger normalized constant; the large constant bounds that ratio by
    // sqrt(1 + 1 / (2 C^2)).
    let c2 = SUCCESSOR_CONST * SUCCESSOR_CONST;
    let rms_token = ((1.0 + 2.0 * c2 + RMS_EPS as f64 * d as f64) / d as f64).sqrt();
    let norm_const = SUCCESSOR_CONST / rms_token;

    let theta = rope_frequencies(config.rope_base, d);
    let half = d / 2;
    let pairs = half.min(16);
    let chosen: Vec<usize> = (0..pairs).map(|m| m * half / pairs).collect();
    let gap = chosen_pair_gap(&chosen, &theta);
    // score = (alpha * norm_const)^2 * sum_m cos(theta_m (delta - 1)) / sqrt(d)
    let alpha = (SUCCESSOR_SCORE_GAP * (d as f64).sqrt() / gap).sqrt() / norm_const;

    let layer = &mut model.layers[0];
    for &j in &chosen {
        layer.wq[c0 * d + 2 * j] = alpha as f32;
        layer.wk[c0 * d + 2 * j] = (alpha * theta[j].cos()) as f32;
        layer.wk[c0 * d + 2 * j + 1] = (alpha * theta[j].sin()) as f32;
    }
    for t in 0..v {
        layer.wv[t * d + (v + t)] = 1.0;
    }
    for i in 0..d {
        layer.wo[i * d + i] = 1.0;
    }
    let head_scale = rms_token as f32;
    for u in 0..v {
        let target = (u + 2 * stride) % v;
        model.lm_head[(v + u) * v + target] = head_scale;
    }
    Ok(model)
}

/// Rotary angular frequencies `base^(-2i/head_dim)` for each pair `i`.
pub(crate) fn rope_frequencies(base: f32, head_dim: usize) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|i| (base as f64).powf(-2.0 * i as f64 / head_dim as f64))
        .collect()
}

/// `min over n in 1..MAX of (P - sum_m cos(theta_m * n))`.
fn chosen_pair_gap(chosen: &[usize], theta: &[f64]) -> f64 {
    let p = chosen.len() as f64;
    (1..SUCCESSOR_MAX_POSITION)
        .map(|n| {
            let s: f64 = chosen.iter().map(|&j| (theta[j] * n as f64).cos()).sum();
            p - s
        })
        .fold(f64::INFINITY, f64::min)
}
