//! Training-free multi-token speculative decoding by probing a frozen
//! decoder-only transformer with synthesized mask embeddings.
//!
//! A decode step feeds the model one flattened block: the last committed
//! token, a draft tree of candidate future tokens, and a chain of mask
//! embeddings behind every tree position. The same pass verifies the current
//! tree against the model's own selections and produces the mask logits that
//! seed the next tree, so output is identical to plain autoregressive
//! decoding while model calls drop.
//!
//! Module map:
//! - [`lm`]: the frozen model, KV cache, and forward pass.
//! - [`tokenizer`], [`weights`], [`records`]: byte tokenizer, weights file,
//!   prompt corpus and metrics JSONL.
//! - [`probe`]: mask embedding initialisation and EMA updates.
//! - [`tree`]: draft tree construction, pruning, and flattening.
//! - [`layout`]: tree attention masks and position ids.
//! - [`engine`]: the decode loop, autoregressive oracle, prompt-lookup
//!   baseline, and bench runner.
//! - [`diagnostics`]: hidden-state cosine traces and the top-K inclusion
//!   threshold check.

pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod exec;
pub mod layout;
pub mod lm;
pub mod probe;
pub mod records;
pub mod tokenizer;
pub mod tree;
pub mod weights;

pub use error::{EspError, Result};
pub use exec::Exec;
pub use lm::{build_random_model, build_successor_model, FrozenModel, KvCache, ModelConfig, TokenId};
