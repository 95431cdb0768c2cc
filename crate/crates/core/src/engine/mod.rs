//! The decode loop.
//!
//! Prefill runs the prompt followed by `k` chained masks; the last prompt
//! position yields the first token and the masks seed the first tree. Each
//! later call feeds `[root, tree nodes, masks]`, walks the tree against the
//! model's own selections, commits the accepted path plus one bonus token,
//! and seeds the next tree from the masks behind the deepest accepted
//! position. The cache always holds every committed token except the
//! newest, which is the next block's root.

mod baseline;
mod bench;
mod select;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use baseline::{decode_autoregressive, decode_pld, pld_lookup, run_autoregressive, PLD_MAX_DRAFT, PLD_NGRAM};
pub use bench::{default_suite, run_bench, summarize, BenchReport, Method, MethodSummary};
pub use select::{argmax, position_uniform, select};

use crate::error::{EspError, Result};
use crate::layout::{advance_layout_efficient, build_layout_naive, gather_accept_path_columns, AttentionLayout};
use crate::lm::{AttentionMask, ForwardRequest, ForwardResult, FrozenModel, KvCache, TokenId};
use crate::probe::{MaskState, MaskStrategy, DEFAULT_LAMBDA};
use crate::records::RunRecord;
use crate::tree::{build_tree, flatten, prune, BranchConfig, DraftTree, Slot};

pub const DEFAULT_MAX_CONTEXT: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub block_complexity: usize,
    pub k: usize,
    pub branch: BranchConfig,
    pub mask_strategy: MaskStrategy,
    pub lambda: f32,
    pub temperature: f32,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub pruning: bool,
    pub efficient_layout: bool,
    pub capture_diagnostics: bool,
    pub stop_token: Option<TokenId>,
    pub max_context: usize,
}

impl EngineConfig {
    /// Greedy, mean-init, pruning on, default branch for `(bc, k)`.
    pub fn new(block_complexity: usize, k: usize) -> Result<Self> {
        let branch = BranchConfig::default_for(block_complexity, k)?;
        let efficient_layout = branch.is_static();
        Ok(EngineConfig {
            block_complexity,
            k,
            branch,
            mask_strategy: MaskStrategy::default(),
            lambda: DEFAULT_LAMBDA,
            temperature: 0.0,
            seed: 0,
            max_new_tokens: 64,
            pruning: true,
            efficient_layout,
            capture_diagnostics: false,
            stop_token: None,
            max_context: DEFAULT_MAX_CONTEXT,
        })
    }

    pub fn with_branch(mut self, branch: BranchConfig) -> Self {
        self.efficient_layout = self.efficient_layout && branch.is_static();
        self.branch = branch;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.branch.validate()?;
        self.branch.check_against(self.block_complexity, self.k)?;
        if self.efficient_layout && !self.branch.is_static() {
            return Err(EspError::InvalidBranch(
                "the efficient layout needs a static branch".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(EspError::InvalidConfig(format!("temperature {} must be >= 0", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(EspError::InvalidConfig(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.max_new_tokens == 0 {
            return Err(EspError::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// What one model call produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub call_index: u64,
    pub accepted_count: usize,
    pub emitted: usize,
    pub block_len: usize,
}

/// A finished decode.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub generated: Vec<TokenId>,
    pub model_calls: u64,
    pub accepted_histogram: BTreeMap<usize, u64>,
    pub steps: Vec<StepMetrics>,
    pub wall_nanos: u64,
}

impl DecodeOutput {
    pub fn tau(&self) -> f64 {
        self.generated.len() as f64 / self.model_calls as f64
    }

    pub fn to_record(&self, prompt_id: &str, method: &str, config: serde_json::Value) -> RunRecord {
        RunRecord {
            prompt_id: prompt_id.to_string(),
            method: method.to_string(),
            config,
            output_tokens: self.generated.clone(),
            tau: self.tau(),
            model_calls: self.model_calls,
            accepted_histogram: self.accepted_histogram.clone(),
            wall_nanos: self.wall_nanos,
        }
    }
}

/// Sampling and stopping rules shared by every decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Sampling {
    pub temperature: f32,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub stop_token: Option<TokenId>,
}

impl From<&EngineConfig> for Sampling {
    fn from(c: &EngineConfig) -> Self {
        Sampling {
            temperature: c.temperature,
            seed: c.seed,
            max_new_tokens: c.max_new_tokens,
            stop_token: c.stop_token,
        }
    }
}

/// Session state between model calls.
#[derive(Debug, Clone)]
pub struct DecodeState {
    /// Prompt followed by every committed token.
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
    pub cache: KvCache,
    /// `None` for mask-free decoders.
    pub masks: Option<MaskState>,
    /// Tree to verify on the next call.
    pub tree: Option<DraftTree>,
    /// Layout used by the last call.
    pub layout: Option<AttentionLayout>,
    pub model_calls: u64,
    pub accepted_histogram: BTreeMap<usize, u64>,
    pub steps: Vec<StepMetrics>,
    pub finished: bool,
    capture: bool,
}

impl DecodeState {
    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    pub fn root(&self) -> TokenId {
        *self.tokens.last().expect("prefill commits a token")
    }

    fn record_call(&mut self, accepted: usize, emitted: usize, block_len: usize) {
        *self.accepted_histogram.entry(accepted).or_insert(0) += 1;
        if self.capture {
            self.steps.push(StepMetrics {
                call_index: self.model_calls,
                accepted_count: accepted,
                emitted,
                block_len,
            });
        }
        self.model_calls += 1;
    }

    /// Append selections, honouring the stop token and token budget.
    /// Returns how many were committed.
    fn commit(&mut self, selected: &[TokenId], sampling: &Sampling) -> usize {
        let room = sampling.max_new_tokens - self.generated().len();
        let mut n = 0;
        for &t in selected.iter().take(room) {
            self.tokens.push(t);
            n += 1;
            if Some(t) == sampling.stop_token {
                self.finished = true;
                break;
            }
        }
        if self.generated().len() >= sampling.max_new_tokens {
            self.finished = true;
        }
        n
    }

    pub fn output(&self, wall_nanos: u64) -> DecodeOutput {
        DecodeOutput {
            generated: self.generated().to_vec(),
            model_calls: self.model_calls,
            accepted_histogram: self.accepted_histogram.clone(),
            steps: self.steps.clone(),
            wall_nanos,
        }
    }
}

pub(crate) fn check_context(len: usize, max: usize) -> Result<()> {
    if len > max {
        return Err(EspError::ContextOverflow { len, max });
    }
    Ok(())
}

/// Forward `prompt ++ masks` causally and commit the first token.
pub(crate) fn prefill_with(
    model: &FrozenModel,
    prompt: &[TokenId],
    masks: Option<MaskState>,
    sampling: &Sampling,
    capture: bool,
) -> Result<(DecodeState, ForwardResult)> {
    if prompt.is_empty() {
        return Err(EspError::EmptyPrompt);
    }
    let t = prompt.len();
    let k = masks.as_ref().map_or(0, |m| m.k());
    let mut emb = model.embed_all(prompt)?;
    if let Some(m) = &masks {
        for row in m.masks() {
            emb.extend_from_slice(row);
        }
    }
    let n = t + k;
    let positions: Vec<u32> = (0..n as u32).collect();
    let mut cache = model.new_cache();
    let req = ForwardRequest::new(emb, positions, AttentionMask::causal(0, n));
    let res = model.forward(&req, &mut cache)?;
    cache.truncate(t);
    let mut state = DecodeState {
        tokens: prompt.to_vec(),
        prompt_len: t,
        cache,
        masks,
        tree: None,
        layout: None,
        model_calls: 0,
        accepted_histogram: BTreeMap::new(),
        steps: Vec::new(),
        finished: false,
        capture,
    };
    let first = select(res.logits_at(t - 1), sampling.temperature, sampling.seed, t as u64);
    state.commit(&[first], sampling);
    state.record_call(0, 1, n);
    Ok((state, res))
}

/// Result of verifying one block.
pub(crate) struct Verified {
    pub result: ForwardResult,
    /// Accepted node indices, root excluded.
    pub chain: Vec<usize>,
    pub committed: usize,
}

/// Forward the tree block, walk it, commit, and compact the cache.
pub(crate) fn verify_block(
    model: &FrozenModel,
    state: &mut DecodeState,
    tree: &DraftTree,
    layout: &AttentionLayout,
    sampling: &Sampling,
) -> Result<Verified> {
    let p0 = state.cache.len();
    if state.tokens.len() != p0 + 1 || layout.cache_len != p0 || tree.root != state.root() {
        return Err(EspError::InvalidTree("block does not continue the committed history".into()));
    }
    let d = model.model_dim();
    let mut emb = Vec::with_capacity(layout.block_len() * d);
    for slot in &layout.slot_map {
        match *slot {
            Slot::Root => emb.extend_from_slice(model.embed(tree.root)?),
            Slot::Node(i) => emb.extend_from_slice(model.embed(tree.nodes[i].token)?),
            Slot::Mask { index, .. } => {
                let m = state
                    .masks
                    .as_ref()
                    .ok_or_else(|| EspError::InvalidTree("mask slot without mask state".into()))?;
                emb.extend_from_slice(m.mask(index - 1));
            }
        }
    }
    let req = ForwardRequest::new(emb, layout.position_ids.clone(), layout.mask.clone());
    let result = model.forward(&req, &mut state.cache)?;

    let mut selected = Vec::new();
    let mut chain = Vec::new();
    let mut slot = 0;
    let mut parent = None;
    let mut position = (p0 + 1) as u64;
    loop {
        let t = select(result.logits_at(slot), sampling.temperature, sampling.seed, position);
        selected.push(t);
        let Some(c) = tree.children(parent).find(|&c| tree.nodes[c].token == t) else {
            break;
        };
        chain.push(c);
        slot = tree.nodes[c].layout_slot.expect("flattened tree");
        parent = Some(c);
        position += 1;
    }

    let path = gather_accept_path_columns(layout, tree, &chain)?;
    let keep: Vec<usize> = (0..p0).chain(path.iter().map(|&s| p0 + s)).collect();
    state.cache.compact(&keep)?;
    let committed = state.commit(&selected, sampling);
    if state.finished {
        // Keep the cache aligned with the committed history.
        state.cache.truncate(state.tokens.len() - 1);
    }
    state.record_call(committed - 1, committed, layout.block_len());
    chain.truncate(committed - 1);
    Ok(Verified {
        result,
        chain,
        committed,
    })
}

/// Mask-logit rows behind `anchor` (`None` = root), one per mask.
fn anchor_mask_logits(result: &ForwardResult, layout: &AttentionLayout, anchor: Option<usize>, k: usize) -> Vec<Vec<f32>> {
    (1..=k)
        .map(|index| {
            let slot = layout
                .slot_map
                .iter()
                .position(|s| *s == Slot::Mask { anchor, index })
                .expect("every anchor carries k masks");
            result.logits_at(slot).to_vec()
        })
        .collect()
}

fn next_tree(state: &DecodeState, mask_logits: &[Vec<f32>], config: &EngineConfig) -> Result<DraftTree> {
    let tree = build_tree(state.root(), mask_logits, &config.branch)?;
    if config.pruning {
        prune(&tree, mask_logits)
    } else {
        Ok(tree)
    }
}

fn ema(model: &FrozenModel, state: &mut DecodeState) -> Result<()> {
    let e = model.embed(state.root())?.to_vec();
    if let Some(m) = state.masks.as_mut() {
        m.ema_update(&e);
    }
    Ok(())
}

/// Run the prompt plus `k` masks; commit the first token and build the
/// first tree.
pub fn prefill(model: &FrozenModel, prompt: &[TokenId], config: &EngineConfig) -> Result<DecodeState> {
    config.validate()?;
    if prompt.is_empty() {
        return Err(EspError::EmptyPrompt);
    }
    check_context(prompt.len() + config.k, config.max_context)?;
    let masks = MaskState::init(model, prompt, config.k, config.mask_strategy)?.with_lambda(config.lambda);
    let sampling = Sampling::from(config);
    let (mut state, res) = prefill_with(model, prompt, Some(masks), &sampling, config.capture_diagnostics)?;
    ema(model, &mut state)?;
    if !state.finished {
        let t = prompt.len();
        let rows: Vec<Vec<f32>> = (0..config.k).map(|j| res.logits_at(t + j).to_vec()).collect();
        state.tree = Some(next_tree(&state, &rows, config)?);
    }
    Ok(state)
}

/// One generate-and-verify call.
pub fn step(model: &FrozenModel, state: &mut DecodeState, config: &EngineConfig) -> Result<StepMetrics> {
    let mut tree = state
        .tree
        .take()
        .ok_or_else(|| EspError::InvalidTree("no pending draft tree".into()))?;
    let p0 = state.cache.len();
    check_context(p0 + 1 + tree.max_depth() + config.k, config.max_context)?;
    let layout = match (&state.layout, config.efficient_layout) {
        (Some(prev), true) => {
            let slots = flatten(&mut tree);
            let next = advance_layout_efficient(prev, p0 - prev.cache_len)?;
            if next.slot_map != slots {
                return Err(EspError::LayoutMisuse("tree shape changed under the efficient layout".into()));
            }
            next
        }
        _ => build_layout_naive(&mut tree, p0, p0 as u32)?,
    };
    let sampling = Sampling::from(config);
    let v = verify_block(model, state, &tree, &layout, &sampling)?;
    ema(model, state)?;
    if !state.finished {
        let anchor = v.chain.last().copied();
        let rows = anchor_mask_logits(&v.result, &layout, anchor, config.k);
        state.tree = Some(next_tree(state, &rows, config)?);
    }
    let metrics = StepMetrics {
        call_index: state.model_calls - 1,
        accepted_count: v.committed - 1,
        emitted: v.committed,
        block_len: layout.block_len(),
    };
    state.layout = Some(layout);
    Ok(metrics)
}

/// Prefill, then step until the token budget or the stop token.
pub fn decode(model: &FrozenModel, prompt: &[TokenId], config: &EngineConfig) -> Result<DecodeOutput> {
    let start = Instant::now();
    check_context(prompt.len() + config.max_new_tokens + 2 * config.k, config.max_context)?;
    let mut state = prefill(model, prompt, config)?;
    while !state.finished {
        step(model, &mut state, config)?;
    }
    Ok(state.output(start.elapsed().as_nanos() as u64))
}

#[cfg(test)]
mod tests;
