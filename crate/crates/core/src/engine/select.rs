use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lm::TokenId;

/// Index of the largest logit; the lowest id wins ties.
pub fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// The uniform draw used for the token at sequence index `position`.
/// Every decoder draws from the same stream for the same position, so
/// matching selections commit identical tokens.
pub fn position_uniform(seed: u64, position: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(position);
    rng.random::<f64>()
}

/// Greedy at temperature 0, otherwise an inverse-CDF draw from
/// `softmax(logits / temperature)` using the position's uniform.
pub fn select(logits: &[f32], temperature: f32, seed: u64, position: u64) -> TokenId {
    if temperature == 0.0 {
        return argmax(logits);
    }
    let t = temperature as f64;
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let weights: Vec<f64> = logits.iter().map(|&x| ((x as f64 - max) / t).exp()).collect();
    let total: f64 = weights.iter().sum();
    let target = position_uniform(seed, position) * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
        }
        acc += w;
        if acc > target {
            return i as TokenId;
        }
    }
    last as TokenId
}
