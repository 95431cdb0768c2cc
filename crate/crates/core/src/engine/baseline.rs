//! Plain autoregressive decoding and prompt-lookup drafting.

use std::time::Instant;

use super::{check_context, prefill_with, select, verify_block, DecodeOutput, EngineConfig, Sampling};
use crate::error::Result;
use crate::layout::build_layout_naive;
use crate::lm::{AttentionMask, ForwardRequest, FrozenModel, TokenId};
use crate::tree::DraftTree;

/// Trailing n-gram length matched by prompt lookup.
pub const PLD_NGRAM: usize = 3;
/// Longest single-path draft prompt lookup proposes.
pub const PLD_MAX_DRAFT: usize = 10;

/// One token per model call over a causal cache.
pub fn run_autoregressive(model: &FrozenModel, prompt: &[TokenId], config: &EngineConfig) -> Result<DecodeOutput> {
    let start = Instant::now();
    let sampling = Sampling::from(config);
    check_context(prompt.len() + config.max_new_tokens, config.max_context)?;
    let (mut state, _) = prefill_with(model, prompt, None, &sampling, config.capture_diagnostics)?;
    while !state.finished {
        let pos = state.cache.len();
        let req = ForwardRequest::new(
            model.embed(state.root())?.to_vec(),
            vec![pos as u32],
            AttentionMask::causal(pos, 1),
        );
        let res = model.forward(&req, &mut state.cache)?;
        let t = select(res.logits_at(0), sampling.temperature, sampling.seed, (pos + 1) as u64);
        state.commit(&[t], &sampling);
        state.record_call(0, 1, 1);
    }
    Ok(state.output(start.elapsed().as_nanos() as u64))
}

/// Generated tokens only.
pub fn decode_autoregressive(
    model: &FrozenModel,
    prompt: &[TokenId],
    temperature: f32,
    seed: u64,
    max_new_tokens: usize,
) -> Result<Vec<TokenId>> {
    let mut config = EngineConfig::new(10, 1)?;
    config.temperature = temperature;
    config.seed = seed;
    config.max_new_tokens = max_new_tokens;
    Ok(run_autoregressive(model, prompt, &config)?.generated)
}

/// Continuation after the most recent earlier occurrence of the trailing
/// n-gram, up to `PLD_MAX_DRAFT` tokens. Empty when there is no match.
pub fn pld_lookup(context: &[TokenId]) -> &[TokenId] {
    let n = context.len();
    if n <= PLD_NGRAM {
        return &[];
    }
    let tail = &context[n - PLD_NGRAM..];
    (0..n - PLD_NGRAM)
        .rev()
        .find(|&s| &context[s..s + PLD_NGRAM] == tail)
        .map_or(&[], |s| {
            let from = s + PLD_NGRAM;
            &context[from..(from + PLD_MAX_DRAFT).min(n)]
        })
}

/// Prompt lookup decoding: draft a single path copied from the context,
/// verify it with the same walk as the tree decoder.
pub fn decode_pld(model: &FrozenModel, prompt: &[TokenId], config: &EngineConfig) -> Result<DecodeOutput> {
    let start = Instant::now();
    let sampling = Sampling::from(config);
    check_context(prompt.len() + config.max_new_tokens + PLD_MAX_DRAFT, config.max_context)?;
    let (mut state, _) = prefill_with(model, prompt, None, &sampling, config.capture_diagnostics)?;
    while !state.finished {
        let draft = pld_lookup(&state.tokens).to_vec();
        let mut tree = DraftTree::chain(state.root(), &draft);
        let p0 = state.cache.len();
        let layout = build_layout_naive(&mut tree, p0, p0 as u32)?;
        verify_block(model, &mut state, &tree, &layout, &sampling)?;
    }
    Ok(state.output(start.elapsed().as_nanos() as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_finds_most_recent() {
        let ctx = [1, 2, 3, 9, 1, 2, 3, 7, 8, 1, 2, 3];
        assert_eq!(pld_lookup(&ctx), &[7, 8, 1, 2, 3]);
        assert!(pld_lookup(&[1, 2, 3, 4]).is_empty());
        assert!(pld_lookup(&[1, 2]).is_empty());
    }

    #[test]
    fn lookup_caps_draft() {
        let ctx: Vec<TokenId> = (0..40).map(|i| i % 5).collect();
        assert_eq!(pld_lookup(&ctx).len(), 5);
        let ctx: Vec<TokenId> = (0..40).map(|i| if i < 3 { 0 } else { i }).chain([0, 0, 0]).collect();
        assert_eq!(pld_lookup(&ctx).len(), PLD_MAX_DRAFT);
    }
}
