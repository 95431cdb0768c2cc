//! Mask embeddings used to probe the frozen model for tokens beyond the next.
//!
//! Three initialisations are supported: the mean of the prompt embeddings,
//! the embeddings of earlier prompt tokens (`m_i = e_{t-k-i}`, 1-based), and
//! a Gaussian draw fitted to the embedding table (optionally shifted by a
//! multiple of sigma to probe outside the table's distribution). After each
//! model call the masks move toward the newest committed token's embedding:
//! `m <- m + lambda (e - m)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{EspError, Result};
use crate::lm::{FrozenModel, TokenId};

pub const DEFAULT_LAMBDA: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskInit {
    PromptMean,
    LastK,
    GaussianSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskStrategy {
    pub kind: MaskInit,
    /// Shift of the Gaussian mean in units of sigma (0, 5, 10 in the
    /// robustness sweep). Ignored by the other kinds.
    pub sample_scale: f32,
    pub seed: u64,
    /// Use one pooled sigma for all dimensions instead of per-dimension.
    pub pooled_sigma: bool,
}

impl MaskStrategy {
    pub fn new(kind: MaskInit) -> Self {
        MaskStrategy {
            kind,
            sample_scale: 0.0,
            seed: 0,
            pooled_sigma: false,
        }
    }
}

impl Default for MaskStrategy {
    fn default() -> Self {
        MaskStrategy::new(MaskInit::PromptMean)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    embeddings: Vec<Vec<f32>>,
    strategy: MaskStrategy,
    lambda: f32,
    step: u64,
}

impl MaskState {
    fn from_shared(value: Vec<f32>, k: usize, strategy: MaskStrategy) -> Self {
        MaskState {
            embeddings: vec![value; k],
            strategy,
            lambda: DEFAULT_LAMBDA,
            step: 0,
        }
    }

    /// Every mask set to the mean of the prompt embeddings (`n x dim`, flat).
    pub fn init_mean(prompt: &[f32], dim: usize, k: usize) -> Result<Self> {
        check_k(k)?;
        let t = prompt.len() / dim.max(1);
        if t == 0 {
            return Err(EspError::EmptyPrompt);
        }
        let mut acc = vec![0.0f64; dim];
        for row in prompt.chunks_exact(dim) {
            for (a, &x) in acc.iter_mut().zip(row) {
                *a += x as f64;
            }
        }
        let mean = acc.iter().map(|&s| (s / t as f64) as f32).collect();
        Ok(Self::from_shared(mean, k, MaskStrategy::new(MaskInit::PromptMean)))
    }

    /// `m_i = e_{t-k-i}` for `i = 1..=k`, positions 1-based; needs `t > 2k`.
    pub fn init_last_k(prompt: &[f32], dim: usize, k: usize) -> Result<Self> {
        check_k(k)?;
        let t = prompt.len() / dim.max(1);
        if t <= 2 * k {
            return Err(EspError::PromptTooShort {
                len: t,
                k,
                need: 2 * k,
            });
        }
        let embeddings = (1..=k)
            .map(|i| {
                let idx = t - k - i; // 1-based position
                prompt[(idx - 1) * dim..idx * dim].to_vec()
            })
            .collect();
        Ok(MaskState {
            embeddings,
            strategy: MaskStrategy::new(MaskInit::LastK),
            lambda: DEFAULT_LAMBDA,
            step: 0,
        })
    }

    /// One draw from `N(mu + scale * sigma, sigma^2 I)` fitted to the
    /// embedding table (`V x dim`, flat), shared by all `k` masks.
    pub fn init_sample(table: &[f32], dim: usize, k: usize, strategy: MaskStrategy) -> Result<Self> {
        check_k(k)?;
        let (mu, sigma) = embedding_stats(table, dim, strategy.pooled_sigma)?;
        let mut rng = ChaCha8Rng::seed_from_u64(strategy.seed);
        let shift = strategy.sample_scale as f64;
        let value = mu
            .iter()
            .zip(&sigma)
            .map(|(&m, &s)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (m + s * (shift + z)) as f32
            })
            .collect();
        Ok(Self::from_shared(
            value,
            k,
            MaskStrategy {
                kind: MaskInit::GaussianSample,
                ..strategy
            },
        ))
    }

    /// Dispatch on `strategy.kind` for a prompt under `model`.
    pub fn init(model: &FrozenModel, prompt: &[TokenId], k: usize, strategy: MaskStrategy) -> Result<Self> {
        let dim = model.model_dim();
        let mut state = match strategy.kind {
            MaskInit::PromptMean => Self::init_mean(&model.embed_all(prompt)?, dim, k)?,
            MaskInit::LastK => Self::init_last_k(&model.embed_all(prompt)?, dim, k)?,
            MaskInit::GaussianSample => Self::init_sample(model.embedding_table(), dim, k, strategy)?,
        };
        state.strategy = strategy;
        Ok(state)
    }

    pub fn with_lambda(mut self, lambda: f32) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn k(&self) -> usize {
        self.embeddings.len()
    }

    pub fn lambda(&self) -> f32 {
        self.lambda
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn strategy(&self) -> &MaskStrategy {
        &self.strategy
    }

    /// Mask `i` (0-based).
    pub fn mask(&self, i: usize) -> &[f32] {
        &self.embeddings[i]
    }

    pub fn masks(&self) -> &[Vec<f32>] {
        &self.embeddings
    }

    /// `m_i <- (1 - lambda) m_i + lambda e`, clamped componentwise to the
    /// segment between the old value and `e`.
    pub fn ema_update(&mut self, e: &[f32]) {
        let lam = self.lambda;
        for m in &mut self.embeddings {
            for (mi, &ei) in m.iter_mut().zip(e) {
                let mixed = (1.0 - lam) * *mi + lam * ei;
                *mi = mixed.clamp(mi.min(ei), mi.max(ei));
            }
        }
        self.step += 1;
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(EspError::InvalidConfig("mask count k must be >= 1".into()));
    }
    Ok(())
}

/// Per-dimension mean and (population) standard deviation of the table.
/// With `pooled`, every dimension gets `sqrt(mean_d sigma_d^2)`.
pub fn embedding_stats(table: &[f32], dim: usize, pooled: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = table.len() / dim.max(1);
    if rows == 0 {
        return Err(EspError::ShapeMismatch("empty embedding table".into()));
    }
    let mut mu = vec![0.0f64; dim];
    for row in table.chunks_exact(dim) {
        for (m, &x) in mu.iter_mut().zip(row) {
            *m += x as f64;
        }
    }
    for m in &mut mu {
        *m /= rows as f64;
    }
    let mut var = vec![0.0f64; dim];
    for row in table.chunks_exact(dim) {
        for ((v, &m), &x) in var.iter_mut().zip(&mu).zip(row) {
            let dx = x as f64 - m;
            *v += dx * dx;
        }
    }
    let mut sigma: Vec<f64> = var.iter().map(|v| (v / rows as f64).sqrt()).collect();
    if pooled {
        let p = (var.iter().sum::<f64>() / (rows * dim) as f64).sqrt();
        sigma.iter_mut().for_each(|s| *s = p);
    }
    Ok((mu, sigma))
}
