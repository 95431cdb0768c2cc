//! Hidden-state similarity traces and the top-K inclusion threshold.
//!
//! If the mask's final hidden state `h_m` is close enough in angle to the
//! true token's `h_v`, the true next-next token is among the mask's top-K
//! predictions. With `c_w = max_r |w_r|`, `c_h >= max(|h_m|, |h_v|)`,
//! `c = sqrt(2) c_w c_h`, `i*` the argmax under `h_v`, and `Delta` the gap
//! between the logits of `i*` and the K-th best token under `h_v`:
//!
//! ```text
//! cos(h_m, h_v) >= delta* = 1 - (Delta / 2c)^2   =>   i* in top-K(W^T h_m)
//! ```
//!
//! The bound is one-directional; nothing is claimed below the threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::{argmax, decode_autoregressive};
use crate::error::{EspError, Result};
use crate::exec::Exec;
use crate::lm::{AttentionMask, ForwardRequest, FrozenModel, TokenId};
use crate::probe::MaskState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosTraceRecord {
    pub prompt_id: String,
    /// Sequence index of the true token the mask stands in for.
    pub position: usize,
    pub accepted: bool,
    /// Level 0 is the input embedding, level `l` the output of layer `l`.
    pub cosines: Vec<f64>,
}

/// Which embedding fills the mask slot in a trace.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceMask {
    /// Mean of the prompt embeddings.
    PromptMean,
    Fixed(Vec<f32>),
    /// The true token's own embedding (a sanity check: identical states).
    TrueToken,
}

/// Cosine similarity in `f64`, clamped to `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EspError::ZeroNorm("cosine"));
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Trace over an existing sequence. For each `h < horizon` the true token
/// at index `p = prompt_len + h` and a mask at the same position id (seeing
/// only `tokens[..p]` and itself) are compared level by level; the mask is
/// accepted when its greedy prediction equals `tokens[p + 1]`.
pub fn cosine_trace_tokens(
    model: &FrozenModel,
    prompt_id: &str,
    tokens: &[TokenId],
    prompt_len: usize,
    horizon: usize,
    mask: &TraceMask,
) -> Result<Vec<CosTraceRecord>> {
    if prompt_len == 0 {
        return Err(EspError::EmptyPrompt);
    }
    let available = tokens.len().saturating_sub(prompt_len + 1);
    if horizon > available {
        return Err(EspError::HorizonTooLong { horizon, available });
    }
    let n = tokens.len();
    let d = model.model_dim();
    let mut emb = model.embed_all(tokens)?;
    let mean = match mask {
        TraceMask::PromptMean => Some(MaskState::init_mean(&emb[..prompt_len * d], d, 1)?.mask(0).to_vec()),
        _ => None,
    };
    for h in 0..horizon {
        let p = prompt_len + h;
        match mask {
            TraceMask::PromptMean => emb.extend_from_slice(mean.as_deref().expect("computed above")),
            TraceMask::Fixed(v) => {
                if v.len() != d {
                    return Err(EspError::ShapeMismatch(format!("mask of dim {} for model dim {d}", v.len())));
                }
                emb.extend_from_slice(v)
            }
            TraceMask::TrueToken => emb.extend_from_slice(model.embed(tokens[p])?),
        }
    }
    let rows = n + horizon;
    let mut attn = AttentionMask::causal(0, n);
    let mut full = AttentionMask::new(rows, rows);
    for r in 0..n {
        for c in 0..=r {
            full.set(r, c, attn.get(r, c));
        }
    }
    for h in 0..horizon {
        let p = prompt_len + h;
        for c in 0..p {
            full.set(n + h, c, true);
        }
        full.set(n + h, n + h, true);
    }
    attn = full;
    let mut positions: Vec<u32> = (0..n as u32).collect();
    positions.extend((0..horizon).map(|h| (prompt_len + h) as u32));
    let req = ForwardRequest::new(emb, positions, attn).with_hidden_states();
    let res = model.forward(&req, &mut model.new_cache())?;

    let levels = model.num_layers() + 1;
    (0..horizon)
        .map(|h| {
            let p = prompt_len + h;
            let cosines = (0..levels)
                .map(|l| {
                    cosine(
                        res.hidden_at(l, p).expect("captured"),
                        res.hidden_at(l, n + h).expect("captured"),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CosTraceRecord {
                prompt_id: prompt_id.to_string(),
                position: p,
                accepted: argmax(res.logits_at(n + h)) == tokens[p + 1],
                cosines,
            })
        })
        .collect()
}

/// Greedily continue `prompt` by `horizon + 1` tokens, then trace.
pub fn cosine_trace(
    model: &FrozenModel,
    prompt_id: &str,
    prompt: &[TokenId],
    horizon: usize,
    mask: &TraceMask,
) -> Result<Vec<CosTraceRecord>> {
    let mut tokens = prompt.to_vec();
    tokens.extend(decode_autoregressive(model, prompt, 0.0, 0, horizon + 1)?);
    cosine_trace_tokens(model, prompt_id, &tokens, prompt.len(), horizon, mask)
}

/// Mean cosine at `level` over accepted and rejected records, with counts.
pub fn split_means(records: &[CosTraceRecord], level: usize) -> ((f64, usize), (f64, usize)) {
    let mean = |acc: bool| {
        let xs: Vec<f64> = records
            .iter()
            .filter(|r| r.accepted == acc)
            .map(|r| r.cosines[level])
            .collect();
        let n = xs.len();
        (if n == 0 { f64::NAN } else { xs.iter().sum::<f64>() / n as f64 }, n)
    };
    (mean(true), mean(false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub delta_star: f64,
    pub i_star: usize,
    /// Index of the K-th largest logit under `h_v`.
    pub k_star: usize,
    pub margin: f64,
    pub c_h: f64,
    pub c_w: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub cos: f64,
    pub delta_star: f64,
    pub c_h: f64,
    pub c_w: f64,
    pub c: f64,
    pub k: usize,
    pub i_star: usize,
    pub in_topk: bool,
    pub margin: f64,
}

impl LemmaReport {
    pub fn hypothesis(&self) -> bool {
        self.cos >= self.delta_star
    }

    pub fn counterexample(&self) -> bool {
        self.hypothesis() && !self.in_topk
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `W^T h` for `w` stored `d x V` row-major.
pub fn head_logits(h: &[f64], w: &[f64], vocab: usize) -> Vec<f64> {
    let mut out = vec![0.0; vocab];
    for (i, &hi) in h.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(&w[i * vocab..(i + 1) * vocab]) {
            *o += hi * wij;
        }
    }
    out
}

/// Indices ranked by descending value, ties by index.
fn ranking(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

fn check_shapes(h: &[f64], w: &[f64], vocab: usize, k: usize) -> Result<()> {
    if k == 0 || k > vocab {
        return Err(EspError::InvalidConfig(format!("K={k} must be in 1..={vocab}")));
    }
    if h.is_empty() || w.len() != h.len() * vocab {
        return Err(EspError::ShapeMismatch(format!(
            "W has {} entries for d={} and V={vocab}",
            w.len(),
            h.len()
        )));
    }
    Ok(())
}

/// Largest column norm of `w` (`d x V`).
pub fn max_column_norm(w: &[f64], d: usize, vocab: usize) -> f64 {
    (0..vocab)
        .map(|r| (0..d).map(|i| w[i * vocab + r].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// `delta*` for `h_v`. `c_h` defaults to `|h_v|`.
pub fn lemma_threshold(h_v: &[f64], w: &[f64], vocab: usize, k: usize, c_h: Option<f64>) -> Result<Threshold> {
    check_shapes(h_v, w, vocab, k)?;
    let nv = norm(h_v);
    if nv == 0.0 {
        return Err(EspError::ZeroNorm("h_v"));
    }
    let c_w = max_column_norm(w, h_v.len(), vocab);
    if c_w == 0.0 {
        return Err(EspError::ZeroNorm("W"));
    }
    let c_h = c_h.unwrap_or(nv);
    let logits = head_logits(h_v, w, vocab);
    let order = ranking(&logits);
    let (i_star, k_star) = (order[0], order[k - 1]);
    let margin = logits[i_star] - logits[k_star];
    let c = std::f64::consts::SQRT_2 * c_w * c_h;
    Ok(Threshold {
        delta_star: 1.0 - (margin / (2.0 * c)).powi(2),
        i_star,
        k_star,
        margin,
        c_h,
        c_w,
        c,
    })
}

/// Evaluate the bound on one `(h_m, h_v, W)` instance with
/// `c_h = max(|h_m|, |h_v|)`.
pub fn lemma_check(h_m: &[f64], h_v: &[f64], w: &[f64], vocab: usize, k: usize) -> Result<LemmaReport> {
    check_shapes(h_m, w, vocab, k)?;
    let (nm, nv) = (norm(h_m), norm(h_v));
    if nm == 0.0 {
        return Err(EspError::ZeroNorm("h_m"));
    }
    if nv == 0.0 {
        return Err(EspError::ZeroNorm("h_v"));
    }
    let t = lemma_threshold(h_v, w, vocab, k, Some(nm.max(nv)))?;
    let dot: f64 = h_m.iter().zip(h_v).map(|(a, b)| a * b).sum();
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let cos = (dot / (sq(h_m) * sq(h_v)).sqrt()).clamp(-1.0, 1.0);
    let top = ranking(&head_logits(h_m, w, vocab));
    Ok(LemmaReport {
        cos,
        delta_star: t.delta_star,
        c_h: t.c_h,
        c_w: t.c_w,
        c: t.c,
        k,
        i_star: t.i_star,
        in_topk: top[..k].contains(&t.i_star),
        margin: t.margin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub trials: usize,
    pub d: usize,
    pub vocab: usize,
    pub k: usize,
    pub seed: u64,
    /// Trials with `cos >= delta*`.
    pub hypothesis_satisfied: usize,
    pub in_topk: usize,
    pub counterexamples: usize,
}

/// How a trial's `h_m` relates to its `h_v`.
fn draw_instance(d: usize, vocab: usize, seed: u64, trial: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    let normal = |n: usize, scale: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
    };
    let w = normal(d * vocab, 1.0 / (d as f64).sqrt(), &mut rng);
    let h_v = normal(d, 1.0, &mut rng);
    let noise = normal(d, 1.0, &mut rng);
    let h_m = match trial % 3 {
        0 => noise,
        kind => {
            // Perturbation size 10^-U(0.5, 4), exactly zero now and then.
            let eps = if trial % 30 == 1 { 0.0 } else { 10f64.powf(-rng.random_range(0.5..4.0)) };
            let scale = if kind == 2 { rng.random_range(0.25..4.0) } else { 1.0 };
            h_v.iter().zip(&noise).map(|(v, z)| scale * (v + eps * z)).collect()
        }
    };
    (h_m, h_v, w)
}

/// Count instances where the hypothesis holds but the conclusion fails.
/// A third of the trials are independent draws; the rest perturb (and
/// possibly rescale) `h_v` slightly so the hypothesis is often met.
pub fn lemma_monte_carlo(trials: usize, d: usize, vocab: usize, k: usize, seed: u64, exec: Exec) -> Result<MonteCarloReport> {
    if trials == 0 {
        return Err(EspError::InvalidConfig("trials must be >= 1".into()));
    }
    let reports = exec.map_range(trials, |t| {
        let (h_m, h_v, w) = draw_instance(d, vocab, seed, t);
        lemma_check(&h_m, &h_v, &w, vocab, k)
    });
    let mut out = MonteCarloReport {
        trials,
        d,
        vocab,
        k,
        seed,
        hypothesis_satisfied: 0,
        in_topk: 0,
        counterexamples: 0,
    };
    for r in reports {
        let r = r?;
        out.hypothesis_satisfied += r.hypothesis() as usize;
        out.in_topk += r.in_topk as usize;
        out.counterexamples += r.counterexample() as usize;
    }
    Ok(out)
}

/// Reports for the first `n` Monte Carlo instances, for inspection.
pub fn lemma_samples(n: usize, d: usize, vocab: usize, k: usize, seed: u64) -> Result<Vec<LemmaReport>> {
    (0..n)
        .map(|t| {
            let (h_m, h_v, w) = draw_instance(d, vocab, seed, t);
            lemma_check(&h_m, &h_v, &w, vocab, k)
        })
        .collect()
}
