use super::{AttentionMask, FrozenModel, KvCache, RMS_EPS};
use crate::error::{EspError, Result};

/// One forward pass over a block of input embeddings.
#[derive(Debug, Clone)]
pub struct ForwardRequest {
    /// Flattened `n x d` input embeddings in layout order.
    pub embeddings: Vec<f32>,
    pub position_ids: Vec<u32>,
    /// `n x (cache_len + n)`.
    pub mask: AttentionMask,
    pub capture_hidden_states: bool,
    /// Record per-layer, per-head attention weights over all columns.
    pub capture_attention: bool,
}

impl ForwardRequest {
    pub fn new(embeddings: Vec<f32>, position_ids: Vec<u32>, mask: AttentionMask) -> Self {
        ForwardRequest {
            embeddings,
            position_ids,
            mask,
            capture_hidden_states: false,
            capture_attention: false,
        }
    }

    pub fn with_hidden_states(mut self) -> Self {
        self.capture_hidden_states = true;
        self
    }

    pub fn with_attention(mut self) -> Self {
        self.capture_attention = true;
        self
    }

    pub fn len(&self) -> usize {
        self.position_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position_ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    vocab: usize,
    dim: usize,
    /// `n x V`.
    pub logits: Vec<f32>,
    /// `L + 1` levels (post-embedding, then after each layer), each `n x d`.
    pub hidden_states: Option<Vec<Vec<f32>>>,
    /// `[layer][head]`, each `n x cols` with zeros on excluded columns.
    pub attention: Option<Vec<Vec<Vec<f32>>>>,
    pub cache_len: usize,
}

impl ForwardResult {
    pub fn num_positions(&self) -> usize {
        self.logits.len() / self.vocab
    }

    pub fn logits_at(&self, i: usize) -> &[f32] {
        &self.logits[i * self.vocab..(i + 1) * self.vocab]
    }

    /// Hidden state of block position `i` at `level` (0 = input embedding).
    pub fn hidden_at(&self, level: usize, i: usize) -> Option<&[f32]> {
        self.hidden_states
            .as_ref()
            .map(|h| &h[level][i * self.dim..(i + 1) * self.dim])
    }
}

/// `out[o] += sum_i x[i] * w[i][o]`, accumulating over `i` ascending.
pub(crate) fn matvec_into(x: &[f32], w: &[f32], out_dim: usize, out: &mut [f32]) {
    debug_assert_eq!(w.len(), x.len() * out_dim);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out_dim..(i + 1) * out_dim];
        for (o, &wio) in out.iter_mut().zip(row) {
            *o += xi * wio;
        }
    }
}

fn matmul_rows(x: &[f32], rows: usize, in_dim: usize, w: &[f32], out_dim: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * out_dim];
    for r in 0..rows {
        matvec_into(
            &x[r * in_dim..(r + 1) * in_dim],
            w,
            out_dim,
            &mut out[r * out_dim..(r + 1) * out_dim],
        );
    }
    out
}

fn rms_norm_rows(x: &[f32], dim: usize, gain: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for (src, dst) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        let mut ss = 0.0f32;
        for &v in src {
            ss += v * v;
        }
        let inv = 1.0 / (ss / dim as f32 + RMS_EPS).sqrt();
        for ((o, &v), &g) in dst.iter_mut().zip(src).zip(gain) {
            *o = v * inv * g;
        }
    }
    out
}

/// Rotate interleaved pairs `(2i, 2i+1)` of each head by `pos * theta_i`.
fn apply_rope(x: &mut [f32], positions: &[u32], dim: usize, head_dim: usize, theta: &[f64]) {
    for (row, &pos) in x.chunks_exact_mut(dim).zip(positions) {
        for head in row.chunks_exact_mut(head_dim) {
            for (i, &th) in theta.iter().enumerate() {
                let angle = pos as f64 * th;
                let (s, c) = (angle.sin() as f32, angle.cos() as f32);
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// In-place softmax. Excluded entries never enter the sum.
pub(crate) fn softmax_in_place(scores: &mut [f32]) {
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

impl FrozenModel {
    fn validate_request(&self, req: &ForwardRequest, cache: &KvCache) -> Result<()> {
        let d = self.config.model_dim;
        let n = req.position_ids.len();
        if cache.num_layers() != self.config.num_layers || cache.dim() != d {
            return Err(EspError::ShapeMismatch(format!(
                "cache built for {} layers x {} dims, model has {} x {}",
                cache.num_layers(),
                cache.dim(),
                self.config.num_layers,
                d
            )));
        }
        if req.embeddings.len() != n * d {
            return Err(EspError::ShapeMismatch(format!(
                "{} embedding values for {} positions of dim {}",
                req.embeddings.len(),
                n,
                d
            )));
        }
        let cache_len = cache.len();
        if req.mask.rows() != n || req.mask.cols() != cache_len + n {
            return Err(EspError::ShapeMismatch(format!(
                "mask is {}x{}, expected {}x{}",
                req.mask.rows(),
                req.mask.cols(),
                n,
                cache_len + n
            )));
        }
        for row in 0..n {
            let bits = req.mask.row(row);
            if !bits.iter().any(|&b| b) {
                return Err(EspError::EmptyAttentionRow { row });
            }
            if let Some(off) = bits[cache_len + row + 1..].iter().position(|&b| b) {
                return Err(EspError::ForwardReference {
                    row,
                    col: cache_len + row + 1 + off,
                });
            }
        }
        Ok(())
    }

    /// Run the block, appending its keys and values to `cache`.
    ///
    /// Attention for each row reduces over its attended cache slots in
    /// ascending slot order; the block's own keys occupy slots
    /// `cache_len..cache_len + n`.
    pub fn forward(&self, req: &ForwardRequest, cache: &mut KvCache) -> Result<ForwardResult> {
        self.validate_request(req, cache)?;
        let cfg = &self.config;
        let (d, n, v) = (cfg.model_dim, req.position_ids.len(), cfg.vocab_size);
        let (heads, hd) = (cfg.num_heads, cfg.head_dim());
        let theta = super::rope_frequencies(cfg.rope_base, hd);
        let scale = 1.0 / (hd as f32).sqrt();
        let base = cache.len();
        let cols = base + n;

        let mut x = req.embeddings.clone();
        let mut hidden = req.capture_hidden_states.then(|| vec![x.clone()]);
        let mut attention = req.capture_attention.then(Vec::new);

        cache.push_positions(&req.position_ids);
        // Attended slots per row, ascending.
        let attended: Vec<Vec<usize>> = (0..n)
            .map(|r| (0..cols).filter(|&c| req.mask.get(r, c)).collect())
            .collect();

        for (l, layer) in self.layers.iter().enumerate() {
            let xn = rms_norm_rows(&x, d, &layer.attn_norm);
            let mut q = matmul_rows(&xn, n, d, &layer.wq, d);
            let mut k = matmul_rows(&xn, n, d, &layer.wk, d);
            let vals = matmul_rows(&xn, n, d, &layer.wv, d);
            apply_rope(&mut q, &req.position_ids, d, hd, &theta);
            apply_rope(&mut k, &req.position_ids, d, hd, &theta);
            cache.push_layer(l, &k, &vals);
            let keys = cache.layer_keys(l);
            let values = cache.layer_values(l);

            let mut ctx = vec![0.0f32; n * d];
            let mut layer_attn = attention
                .as_ref()
                .map(|_| vec![vec![0.0f32; n * cols]; heads]);
            for r in 0..n {
                let slots = &attended[r];
                let mut scores = vec![0.0f32; slots.len()];
                for h in 0..heads {
                    let qh = &q[r * d + h * hd..r * d + (h + 1) * hd];
                    for (s, &slot) in scores.iter_mut().zip(slots) {
                        let kh = &keys[slot * d + h * hd..slot * d + (h + 1) * hd];
                        let mut dot = 0.0f32;
                        for (a, b) in qh.iter().zip(kh) {
                            dot += a * b;
                        }
                        *s = dot * scale;
                    }
                    softmax_in_place(&mut scores);
                    let out = &mut ctx[r * d + h * hd..r * d + (h + 1) * hd];
                    for (&w, &slot) in scores.iter().zip(slots) {
                        let vh = &values[slot * d + h * hd..slot * d + (h + 1) * hd];
                        for (o, &vv) in out.iter_mut().zip(vh) {
                            *o += w * vv;
                        }
                    }
                    if let Some(la) = layer_attn.as_mut() {
                        for (&w, &slot) in scores.iter().zip(slots) {
                            la[h][r * cols + slot] = w;
                        }
                    }
                }
            }
            let attn_out = matmul_rows(&ctx, n, d, &layer.wo, d);
            for (xi, ai) in x.iter_mut().zip(&attn_out) {
                *xi += ai;
            }

            let xn = rms_norm_rows(&x, d, &layer.ffn_norm);
            let mut up = matmul_rows(&xn, n, d, &layer.w_up, cfg.ffn_dim);
            for u in up.iter_mut() {
                *u = silu(*u);
            }
            let down = matmul_rows(&up, n, cfg.ffn_dim, &layer.w_down, d);
            for (xi, di) in x.iter_mut().zip(&down) {
                *xi += di;
            }

            if let Some(h) = hidden.as_mut() {
                h.push(x.clone());
            }
            if let (Some(all), Some(la)) = (attention.as_mut(), layer_attn) {
                all.push(la);
            }
        }

        let logits = matmul_rows(&x, n, d, &self.lm_head, v);
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(EspError::ShapeMismatch("non-finite logits".into()));
        }
        Ok(ForwardResult {
            vocab: v,
            dim: d,
            logits,
            hidden_states: hidden,
            attention,
            cache_len: cache.len(),
        })
    }
}
