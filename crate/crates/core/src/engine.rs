//! Small decoder-only transformer used to check conversions in situ.
//!
//! Blocks follow the Llama layout (RMSNorm, causal multi-head attention,
//! gated MLP, residuals) minus rotary embeddings, which never touch the MLP
//! path. Every layer's MLP is dispatched to the dense or the branch forward
//! depending on how the checkpoint stores it.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{resolve_mlp, Checkpoint, LayerMlp, MlpRole, NamingScheme};
use crate::error::{Error, Result};
use crate::tensor::{add_scaled_in_place, linear, Activation, Tensor};

/// Evaluation text shipped with the crate: 4 KiB of mixed prose and code,
/// tokenized as raw bytes.
pub const BUNDLED_CORPUS: &[u8] = include_bytes!("../data/eval_corpus.txt");

pub const INIT_STD: f32 = 0.02;

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub d_inter: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ToyModelConfig {
    /// The standard two-layer fixture.
    fn default() -> Self {
        Self {
            num_layers: 2,
            d_model: 64,
            d_inter: 256,
            num_heads: 4,
            vocab_size: 256,
            seed: 42,
            activation: Activation::Silu,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.d_model == 0 || self.num_heads == 0 || self.vocab_size == 0 {
            return Err(Error::arg("toy model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::arg(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        if self.d_inter < self.d_model {
            return Err(Error::arg(format!(
                "d_inter {} is smaller than d_model {}",
                self.d_inter, self.d_model
            )));
        }
        Ok(())
    }
}

/// Deterministic random model: every weight matrix is drawn from
/// `N(0, 0.02²)` in a fixed order, norm weights are ones.
pub fn build_toy_model(cfg: &ToyModelConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let naming = NamingScheme::llama();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
    let mut draw = |rows: usize, cols: usize| {
        let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
        Tensor::matrix(rows, cols, data)
    };
    let ones = |n: usize| Tensor::vector(vec![1.0; n]);

    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let mut tensors = BTreeMap::new();
    tensors.insert(naming.embed.clone(), draw(v, d)?);
    for layer in 0..cfg.num_layers {
        let name = |t: &str| naming.layer_name(t, layer);
        tensors.insert(name(&naming.input_norm), ones(d)?);
        for proj in [&naming.q_proj, &naming.k_proj, &naming.v_proj, &naming.o_proj] {
            tensors.insert(name(proj), draw(d, d)?);
        }
        tensors.insert(name(&naming.post_attention_norm), ones(d)?);
        let dense = |r| naming.dense_name(layer, r).unwrap();
        tensors.insert(dense(MlpRole::Gate), draw(cfg.d_inter, d)?);
        tensors.insert(dense(MlpRole::Up), draw(cfg.d_inter, d)?);
        tensors.insert(dense(MlpRole::Down), draw(d, cfg.d_inter)?);
    }
    tensors.insert(naming.final_norm.clone(), ones(d)?);
    tensors.insert(naming.lm_head.clone(), draw(v, d)?);

    let mut hints = BTreeMap::new();
    hints.insert("family".to_string(), "toy-llama".to_string());
    hints.insert("num_layers".to_string(), cfg.num_layers.to_string());
    hints.insert("d_model".to_string(), d.to_string());
    hints.insert("d_inter".to_string(), cfg.d_inter.to_string());
    hints.insert("vocab_size".to_string(), v.to_string());
    hints.insert("num_heads".to_string(), cfg.num_heads.to_string());
    hints.insert("activation".to_string(), cfg.activation.to_string());
    hints.insert("seed".to_string(), cfg.seed.to_string());
    Checkpoint::from_tensors(tensors, hints)
}

struct Block {
    input_norm: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    o: Tensor,
    post_norm: Tensor,
    mlp: LayerMlp,
}

/// A checkpoint resolved into per-layer components, ready to run.
pub struct Model<'a> {
    embed: &'a Tensor,
    blocks: Vec<Block>,
    final_norm: &'a Tensor,
    lm_head: &'a Tensor,
    num_heads: usize,
    eps: f32,
    vocab_size: usize,
}

fn rms_norm(x: &Tensor, weight: &Tensor, eps: f32) -> Result<Tensor> {
    let (rows, cols) = x.as_rows()?;
    if weight.len() != cols {
        return Err(Error::dim(format!("norm weight {} vs width {cols}", weight.len())));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let ms = row.iter().map(|v| v * v).sum::<f32>() / cols as f32;
        let inv = 1.0 / (ms + eps).sqrt();
        out.extend(row.iter().zip(weight.data()).map(|(v, w)| v * inv * w));
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, d) = q.dims2()?;
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0f32; n * d];
    let mut scores = vec![0.0f32; n];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..n {
            let qi = &qd[i * d + off..i * d + off + hd];
            let mut max = f32::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                let kj = &kd[j * d + off..j * d + off + hd];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                max = max.max(*s);
            }
            let mut denom = 0.0f32;
            for s in scores.iter_mut().take(i + 1) {
                *s = (*s - max).exp();
                denom += *s;
            }
            let oi = &mut out[i * d + off..i * d + off + hd];
            for (j, s) in scores.iter().enumerate().take(i + 1) {
                let p = s / denom;
                let vj = &vd[j * d + off..j * d + off + hd];
                for (o, x) in oi.iter_mut().zip(vj) {
                    *o += p * x;
                }
            }
        }
    }
    Tensor::matrix(n, d, out)
}

impl<'a> Model<'a> {
    pub fn from_checkpoint(ckpt: &'a Checkpoint) -> Result<Self> {
        let naming = &ckpt.naming;
        let num_heads = ckpt.meta.num_heads.ok_or_else(|| {
            Error::Schema("metadata lacks 'num_heads'; cannot run attention".into())
        })?;
        if num_heads == 0 || !ckpt.meta.d_model.is_multiple_of(num_heads) {
            return Err(Error::Schema(format!(
                "d_model {} is not divisible by {num_heads} heads",
                ckpt.meta.d_model
            )));
        }
        let mut blocks = Vec::with_capacity(ckpt.meta.num_layers);
        for layer in 0..ckpt.meta.num_layers {
            let get = |t: &str| ckpt.tensor(&naming.layer_name(t, layer)).cloned();
            blocks.push(Block {
                input_norm: get(&naming.input_norm)?,
                q: get(&naming.q_proj)?,
                k: get(&naming.k_proj)?,
                v: get(&naming.v_proj)?,
                o: get(&naming.o_proj)?,
                post_norm: get(&naming.post_attention_norm)?,
                mlp: resolve_mlp(ckpt, layer)?,
            });
        }
        let embed = ckpt.tensor(&naming.embed)?;
        // tied embeddings when no separate head is stored
        let lm_head = ckpt.tensors.get(&naming.lm_head).unwrap_or(embed);
        Ok(Self {
            embed,
            blocks,
            final_norm: ckpt.tensor(&naming.final_norm)?,
            lm_head,
            num_heads,
            eps: ckpt.meta.rms_norm_eps,
            vocab_size: lm_head.shape()[0],
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Logits `[seq × vocab]` for a token sequence.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::arg("empty token sequence"));
        }
        let (rows, d) = self.embed.dims2()?;
        let mut h = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= rows.min(self.vocab_size) {
                return Err(Error::arg(format!(
                    "token id {t} out of range for vocabulary of {}",
                    self.vocab_size
                )));
            }
            h.extend_from_slice(self.embed.row(t as usize)?);
        }
        let mut h = Tensor::matrix(tokens.len(), d, h)?;
        for block in &self.blocks {
            let a = rms_norm(&h, &block.input_norm, self.eps)?;
            let attn = causal_attention(
                &linear(&a, &block.q)?,
                &linear(&a, &block.k)?,
                &linear(&a, &block.v)?,
                self.num_heads,
            )?;
            add_scaled_in_place(&mut h, &linear(&attn, &block.o)?, 1.0)?;
            let m = rms_norm(&h, &block.post_norm, self.eps)?;
            add_scaled_in_place(&mut h, &block.mlp.forward(&m)?, 1.0)?;
        }
        linear(&rms_norm(&h, self.final_norm, self.eps)?, self.lm_head)
    }

    /// Sum of next-token negative log-likelihoods over one window, and the
    /// number of predictions it covers.
    fn window_nll(&self, tokens: &[TokenId]) -> Result<(f64, usize)> {
        let logits = self.forward(tokens)?;
        let mut total = 0.0f64;
        for pos in 0..tokens.len() - 1 {
            let row = logits.row(pos)?;
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max + row.iter().map(|&l| (l as f64 - max).exp()).sum::<f64>().ln();
            total += lse - row[tokens[pos + 1] as usize] as f64;
        }
        Ok((total, tokens.len() - 1))
    }
}

pub fn forward_logits(ckpt: &Checkpoint, tokens: &[TokenId]) -> Result<Tensor> {
    Model::from_checkpoint(ckpt)?.forward(tokens)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub proxy_ppl: f64,
    /// Number of scored next-token predictions.
    pub token_count: usize,
    /// Time spent in the scoring forward passes.
    pub wall_clock_seconds: f64,
    pub tokens_generated: usize,
    /// End-to-end time of the greedy generation loop, when one was run.
    #[serde(default)]
    pub generation_seconds: Option<f64>,
}

/// Proxy perplexity over the whole sequence in a single causal pass.
pub fn proxy_perplexity(ckpt: &Checkpoint, tokens: &[TokenId]) -> Result<EvalResult> {
    proxy_perplexity_windowed(ckpt, tokens, tokens.len())
}

/// Proxy perplexity with the sequence cut into consecutive windows of at
/// most `window` tokens, each scored independently. A trailing window shorter
/// than two tokens is ignored.
pub fn proxy_perplexity_windowed(
    ckpt: &Checkpoint,
    tokens: &[TokenId],
    window: usize,
) -> Result<EvalResult> {
    if tokens.len() < 2 {
        return Err(Error::arg(format!(
            "perplexity needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    if window < 2 {
        return Err(Error::arg(format!("evaluation window {window} is below 2")));
    }
    let model = Model::from_checkpoint(ckpt)?;
    let start = Instant::now();
    let (mut nll, mut count) = (0.0f64, 0usize);
    for chunk in tokens.chunks(window).filter(|c| c.len() >= 2) {
        let (n, c) = model.window_nll(chunk)?;
        nll += n;
        count += c;
    }
    let wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(EvalResult {
        proxy_ppl: (nll / count as f64).exp(),
        token_count: count,
        wall_clock_seconds,
        tokens_generated: 0,
        generation_seconds: None,
    })
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of `n_tokens` continuation tokens. Returns the full
/// sequence (prompt included) and the wall-clock time of the loop.
pub fn generate(ckpt: &Checkpoint, prompt: &[TokenId], n_tokens: usize) -> Result<(Vec<TokenId>, f64)> {
    let (seq, _, secs) = generate_traced(ckpt, prompt, n_tokens)?;
    Ok((seq, secs))
}

/// Like [`generate`], also returning the last-position logits of every step.
pub fn generate_traced(
    ckpt: &Checkpoint,
    prompt: &[TokenId],
    n_tokens: usize,
) -> Result<(Vec<TokenId>, Vec<Vec<f32>>, f64)> {
    if n_tokens < 1 {
        return Err(Error::arg("generation needs n_tokens >= 1"));
    }
    if prompt.is_empty() {
        return Err(Error::arg("generation needs a non-empty prompt"));
    }
    let start = Instant::now();
    let model = Model::from_checkpoint(ckpt)?;
    let mut seq = prompt.to_vec();
    let mut steps = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let logits = model.forward(&seq)?;
        let last = logits.row(seq.len() - 1)?.to_vec();
        seq.push(argmax(&last) as TokenId);
        steps.push(last);
    }
    Ok((seq, steps, start.elapsed().as_secs_f64()))
}

/// Byte-level tokenization: each byte is its own token id.
pub fn byte_tokens(bytes: &[u8]) -> Vec<TokenId> {
    bytes.iter().map(|&b| b as TokenId).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::convert_checkpoint;

    fn small() -> ToyModelConfig {
        ToyModelConfig {
            num_layers: 1,
            d_model: 16,
            d_inter: 32,
            num_heads: 2,
            vocab_size: 32,
            seed: 7,
            activation: Activation::Silu,
        }
    }

    #[test]
    fn bundled_corpus_is_4kib() {
        assert_eq!(BUNDLED_CORPUS.len(), 4096);
    }

    #[test]
    fn config_validation() {
        let cfg = ToyModelConfig { d_model: 65, ..Default::default() };
        assert!(matches!(build_toy_model(&cfg), Err(Error::Argument(_))));
        let cfg = ToyModelConfig { d_inter: 32, ..Default::default() };
        assert!(build_toy_model(&cfg).is_err());
    }

    #[test]
    fn toy_model_is_deterministic() {
        let a = build_toy_model(&small()).unwrap();
        let b = build_toy_model(&small()).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let mut other = small();
        other.seed = 8;
        assert_ne!(build_toy_model(&other).unwrap(), a);
    }

    #[test]
    fn logits_shape_and_range_check() {
        let c = build_toy_model(&small()).unwrap();
        assert_eq!(forward_logits(&c, &[3]).unwrap().shape(), &[1, 32]);
        assert_eq!(forward_logits(&c, &[3, 4, 5]).unwrap().shape(), &[3, 32]);
        assert!(matches!(forward_logits(&c, &[32]), Err(Error::Argument(_))));
    }

    #[test]
    fn attention_is_causal() {
        let c = build_toy_model(&small()).unwrap();
        let full = forward_logits(&c, &[1, 2, 3, 4]).unwrap();
        let prefix = forward_logits(&c, &[1, 2]).unwrap();
        for r in 0..2 {
            let d = full
                .row(r)
                .unwrap()
                .iter()
                .zip(prefix.row(r).unwrap())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max);
            assert!(d <= 1e-6);
        }
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let mut c = build_toy_model(&small()).unwrap();
        let head = c.naming.lm_head.clone();
        c.tensors.insert(head, Tensor::zeros(vec![32, 16]).unwrap());
        let r = proxy_perplexity(&c, &[1, 5, 9, 2, 7]).unwrap();
        assert!((r.proxy_ppl - 32.0).abs() < 1e-9);
        assert_eq!(r.token_count, 4);
    }

    #[test]
    fn perplexity_errors_and_bounds() {
        let c = build_toy_model(&small()).unwrap();
        assert!(proxy_perplexity(&c, &[1]).is_err());
        let (seq, secs) = generate(&c, &[1, 2], 12).unwrap();
        assert!(secs > 0.0);
        let r = proxy_perplexity(&c, &seq).unwrap();
        assert!(r.proxy_ppl >= 1.0);
        let w = proxy_perplexity_windowed(&c, &seq, 4).unwrap();
        assert_eq!(w.token_count, 3 + 3 + 3 + 1);
    }

    #[test]
    fn generate_appends_exactly_n() {
        let c = build_toy_model(&small()).unwrap();
        let (seq, _) = generate(&c, &[4, 5, 6], 1).unwrap();
        assert_eq!(seq.len(), 4);
        assert_eq!(&seq[..3], &[4, 5, 6]);
        assert!(generate(&c, &[4], 0).is_err());
    }

    #[test]
    fn single_branch_conversion_generates_identically() {
        let c = build_toy_model(&small()).unwrap();
        let moe = convert_checkpoint(&c, 1).unwrap();
        let (a, _) = generate(&c, &[1, 2, 3], 16).unwrap();
        let (b, _) = generate(&moe, &[1, 2, 3], 16).unwrap();
        assert_eq!(a, b);
        assert!(forward_logits(&c, &a)
            .unwrap()
            .bit_eq(&forward_logits(&moe, &a).unwrap()));
    }

    #[test]
    fn missing_heads_is_a_schema_error() {
        let mut c = build_toy_model(&small()).unwrap();
        c.meta.num_heads = None;
        assert!(matches!(forward_logits(&c, &[1]), Err(Error::Schema(_))));
    }
}
