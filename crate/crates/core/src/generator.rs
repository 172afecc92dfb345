//! Causal self-attention report generator conditioned on a prefix memory.
//!
//! The attention sequence is `[adapter(x), h_1, …, h_T, ŷ_1, …, ŷ_n]`. Memory
//! rows carry a learned segment offset and no positional encoding; token rows
//! get sinusoidal positions. Memory rows attend only to memory, token rows
//! attend to all memory and to tokens at or before their own position.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{affine, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::PAD;

pub const TOKENS: &str = "generator.tokens";
pub const HEAD: &str = "generator.head";
pub const MASK_FILL: f64 = -1e9;
pub const LOG_FLOOR: f64 = 1e-12;

pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) {
    let e = cfg.hidden;
    let std = 1.0 / (e as f64).sqrt();
    store.insert(TOKENS, Tensor::randn(&[cfg.vocab_size, e], std, rng));
    store.linear("generator.adapter", cfg.feature_dim, e, rng);
    store.insert("generator.segment.visual", Tensor::zeros(&[e]));
    store.insert("generator.segment.indicator", Tensor::zeros(&[e]));
    for l in 0..cfg.layers {
        let pre = format!("generator.layers.{l}");
        for ln in ["ln1", "ln2"] {
            store.insert(format!("{pre}.{ln}.gamma"), Tensor::ones(&[e]));
            store.insert(format!("{pre}.{ln}.beta"), Tensor::zeros(&[e]));
        }
        store.linear(&format!("{pre}.attn.qkv"), e, 3 * e, rng);
        store.linear(&format!("{pre}.attn.out"), e, e, rng);
        store.linear(&format!("{pre}.ff.0"), e, cfg.ff_mult * e, rng);
        store.linear(&format!("{pre}.ff.1"), cfg.ff_mult * e, e, rng);
    }
    store.insert("generator.ln_f.gamma", Tensor::ones(&[e]));
    store.insert("generator.ln_f.beta", Tensor::zeros(&[e]));
    store.insert(HEAD, Tensor::randn(&[e, cfg.vocab_size], std, rng));
}

/// Sinusoidal encodings for positions `0..n`, `[n, e]`.
pub fn positional_encoding(n: usize, e: usize) -> Tensor {
    let mut data = vec![0.0; n * e];
    for pos in 0..n {
        for i in 0..e {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / e as f64);
            let angle = pos as f64 / freq;
            data[pos * e + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![n, e], data)
}

/// `true` where attention is forbidden, for `mem` memory rows then `n` tokens.
pub fn causal_mask(mem: usize, n: usize) -> Vec<bool> {
    let p = mem + n;
    let mut mask = vec![false; p * p];
    for i in 0..p {
        for j in 0..p {
            mask[i * p + j] = if i < mem { j >= mem } else { j > i };
        }
    }
    mask
}

pub struct Generator<'a> {
    cfg: &'a ModelConfig,
    params: &'a ParamStore,
}

impl<'a> Generator<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParamStore) -> Self {
        Generator { cfg, params }
    }

    /// Builds the `[T + 1, e]` prefix memory from `x` (`[1, F]`) and `h` (`[T, e]`).
    pub fn memory(&self, g: &Graph, x: Var, h: Var) -> Result<Var> {
        let p = self.params;
        let visual = g.add(affine(p, g, "generator.adapter", x)?, p.bind(g, "generator.segment.visual")?)?;
        let indicators = g.add(h, p.bind(g, "generator.segment.indicator")?)?;
        g.concat(&[visual, indicators], 0)
    }

    /// Hidden states `[n, e]` for the token prefix `tokens` (starting with
    /// `<bos>`). Dropout, including hiding the visual row, is active only
    /// when `rng` is given.
    pub fn forward(
        &self,
        g: &Graph,
        memory: Var,
        tokens: &[u32],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let cfg = self.cfg;
        let p = self.params;
        let e = cfg.hidden;
        if tokens.is_empty() {
            return Err(Error::contract("generator needs at least one token"));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let mem_shape = g.shape(memory);
        if mem_shape != [cfg.indicators + 1, e] {
            return Err(Error::Shape {
                op: "generator memory",
                lhs: mem_shape,
                rhs: vec![cfg.indicators + 1, e],
            });
        }
        if !e.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!("hidden size {e} not divisible by {} heads", cfg.heads)));
        }
        let n = tokens.len();
        let mem = cfg.indicators + 1;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = g.embedding(p.bind(g, TOKENS)?, &ids)?;
        let emb = g.add(emb, g.constant(positional_encoding(n, e)))?;
        let emb = self.dropout(g, emb, &mut rng);
        let mut x = g.concat(&[memory, emb], 0)?;
        let mut mask = causal_mask(mem, n);
        if let Some(r) = rng.as_deref_mut() {
            if cfg.visual_dropout > 0.0 && r.random::<f64>() < cfg.visual_dropout {
                let p = mem + n;
                for i in 1..p {
                    mask[i * p] = true;
                }
            }
        }

        for l in 0..cfg.layers {
            let pre = format!("generator.layers.{l}");
            let a = self.norm(g, x, &format!("{pre}.ln1"))?;
            let att = self.attention(g, a, &pre, &mask)?;
            let att = self.dropout(g, att, &mut rng);
            x = g.add(x, att)?;
            let b = self.norm(g, x, &format!("{pre}.ln2"))?;
            let f = g.relu(affine(p, g, &format!("{pre}.ff.0"), b)?);
            let f = affine(p, g, &format!("{pre}.ff.1"), f)?;
            let f = self.dropout(g, f, &mut rng);
            x = g.add(x, f)?;
        }
        let x = self.norm(g, x, "generator.ln_f")?;
        g.slice(x, 0, mem, n)
    }

    /// Next-token distributions `softmax(h'·W_p)`, one row per position.
    pub fn token_distribution(&self, g: &Graph, hidden: Var) -> Result<Var> {
        let w = self.params.bind(g, HEAD)?;
        g.softmax(g.matmul(hidden, w)?, 1)
    }

    fn norm(&self, g: &Graph, x: Var, prefix: &str) -> Result<Var> {
        let y = g.layer_norm(x, self.cfg.ln_eps);
        let y = g.mul(y, self.params.bind(g, &format!("{prefix}.gamma"))?)?;
        g.add(y, self.params.bind(g, &format!("{prefix}.beta"))?)
    }

    fn attention(&self, g: &Graph, x: Var, pre: &str, mask: &[bool]) -> Result<Var> {
        let e = self.cfg.hidden;
        let heads = self.cfg.heads;
        let d = e / heads;
        let qkv = affine(self.params, g, &format!("{pre}.attn.qkv"), x)?;
        let scale = 1.0 / (d as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = g.slice(qkv, 1, h * d, d)?;
            let k = g.slice(qkv, 1, e + h * d, d)?;
            let v = g.slice(qkv, 1, 2 * e + h * d, d)?;
            let scores = g.scale(g.matmul(q, g.transpose(k)?)?, scale);
            let scores = g.masked_fill(scores, mask, MASK_FILL)?;
            let weights = g.softmax(scores, 1)?;
            outs.push(g.matmul(weights, v)?);
        }
        let joined = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
        affine(self.params, g, &format!("{pre}.attn.out"), joined)
    }

    fn dropout(&self, g: &Graph, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Var {
        match rng.as_deref_mut() {
            Some(r) => g.dropout(x, self.cfg.dropout, true, r),
            None => x,
        }
    }
}

/// Summed cross-entropy of one report: `-Σ_n log p_n[target_n]`, skipping
/// `<pad>` targets.
pub fn report_nll(g: &Graph, probs: Var, targets: &[u32]) -> Result<Var> {
    let shape = g.shape(probs);
    if shape[0] != targets.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} targets",
            shape[0],
            targets.len()
        )));
    }
    let v = shape[1];
    let index: Vec<Option<usize>> = targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != PAD)
        .map(|(i, &t)| Some(i * v + t as usize))
        .collect();
    if index.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let n = index.len();
    let picked = g.gather(probs, index, &[n])?;
    Ok(g.scale(g.sum(g.clamped_log(picked, LOG_FLOOR)), -1.0))
}

/// Generator loss over `l` reports: mean over reports of the summed token
/// cross-entropy.
pub fn generator_loss(g: &Graph, probs: &[Var], targets: &[Vec<u32>]) -> Result<Var> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::contract(format!(
            "{} prediction sets for {} references",
            probs.len(),
            targets.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&p, t) in probs.iter().zip(targets) {
        let nll = report_nll(g, p, t)?;
        total = Some(match total {
            None => nll,
            Some(acc) => g.add(acc, nll)?,
        });
    }
    Ok(g.scale(total.expect("non-empty"), 1.0 / probs.len() as f64))
}

struct LayerWeights {
    ln1: (Tensor, Tensor),
    qkv: (Tensor, Tensor),
    out: (Tensor, Tensor),
    ln2: (Tensor, Tensor),
    ff0: (Tensor, Tensor),
    ff1: (Tensor, Tensor),
}

/// Per-layer attention keys and values of everything decoded so far.
#[derive(Clone, Debug)]
pub struct DecodeState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    tokens: usize,
}

impl DecodeState {
    /// Number of tokens fed so far.
    pub fn len(&self) -> usize {
        self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens == 0
    }
}

/// Graph-free generator evaluation that feeds one token at a time and keeps
/// a key/value cache, for decoding. Computes the same function as
/// [`Generator::forward`] followed by [`Generator::token_distribution`].
pub struct IncrementalDecoder {
    hidden: usize,
    heads: usize,
    vocab: usize,
    eps: f64,
    tokens: Tensor,
    head: Tensor,
    ln_f: (Tensor, Tensor),
    layers: Vec<LayerWeights>,
}

impl IncrementalDecoder {
    pub fn new(cfg: &ModelConfig, params: &ParamStore) -> Result<Self> {
        let pair = |prefix: &str, a: &str, b: &str| -> Result<(Tensor, Tensor)> {
            Ok((
                params.get(&format!("{prefix}.{a}"))?.clone(),
                params.get(&format!("{prefix}.{b}"))?.clone(),
            ))
        };
        let layers = (0..cfg.layers)
            .map(|l| {
                let pre = format!("generator.layers.{l}");
                Ok(LayerWeights {
                    ln1: pair(&format!("{pre}.ln1"), "gamma", "beta")?,
                    qkv: pair(&format!("{pre}.attn.qkv"), "weight", "bias")?,
                    out: pair(&format!("{pre}.attn.out"), "weight", "bias")?,
                    ln2: pair(&format!("{pre}.ln2"), "gamma", "beta")?,
                    ff0: pair(&format!("{pre}.ff.0"), "weight", "bias")?,
                    ff1: pair(&format!("{pre}.ff.1"), "weight", "bias")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(IncrementalDecoder {
            hidden: cfg.hidden,
            heads: cfg.heads,
            vocab: cfg.vocab_size,
            eps: cfg.ln_eps,
            tokens: params.get(TOKENS)?.clone(),
            head: params.get(HEAD)?.clone(),
            ln_f: pair("generator.ln_f", "gamma", "beta")?,
            layers,
        })
    }

    /// Runs the memory rows through every layer and caches their keys and values.
    pub fn start(&self, memory: &Tensor) -> Result<DecodeState> {
        let e = self.hidden;
        if memory.ndim() != 2 || memory.shape()[1] != e {
            return Err(Error::Shape {
                op: "decoder memory",
                lhs: memory.shape().to_vec(),
                rhs: vec![0, e],
            });
        }
        let rows = memory.shape()[0];
        let mut xs: Vec<Vec<f64>> = (0..rows).map(|i| memory.row(i).to_vec()).collect();
        let mut state = DecodeState {
            keys: Vec::with_capacity(self.layers.len()),
            values: Vec::with_capacity(self.layers.len()),
            tokens: 0,
        };
        for lw in &self.layers {
            let mut keys = Vec::with_capacity(rows * e);
            let mut values = Vec::with_capacity(rows * e);
            let mut queries = Vec::with_capacity(rows);
            for x in &xs {
                let qkv = affine_row(&layer_norm_row(x, &lw.ln1, self.eps), &lw.qkv);
                queries.push(qkv[..e].to_vec());
                keys.extend_from_slice(&qkv[e..2 * e]);
                values.extend_from_slice(&qkv[2 * e..]);
            }
            for (x, q) in xs.iter_mut().zip(&queries) {
                let ctx = self.attend(q, &keys, &values, rows);
                self.finish_layer(lw, x, &ctx);
            }
            state.keys.push(keys);
            state.values.push(values);
        }
        Ok(state)
    }

    /// Feeds `token` and returns the next-token distribution.
    pub fn step(&self, state: &mut DecodeState, token: u32) -> Result<Vec<f64>> {
        let e = self.hidden;
        if token as usize >= self.vocab {
            return Err(Error::contract(format!(
                "token id {token} out of range for vocabulary of {}",
                self.vocab
            )));
        }
        let pe = positional_encoding(state.tokens + 1, e);
        let mut x: Vec<f64> = self
            .tokens
            .row(token as usize)
            .iter()
            .zip(pe.row(state.tokens))
            .map(|(a, b)| a + b)
            .collect();
        for (l, lw) in self.layers.iter().enumerate() {
            let qkv = affine_row(&layer_norm_row(&x, &lw.ln1, self.eps), &lw.qkv);
            state.keys[l].extend_from_slice(&qkv[e..2 * e]);
            state.values[l].extend_from_slice(&qkv[2 * e..]);
            let rows = state.keys[l].len() / e;
            let ctx = self.attend(&qkv[..e], &state.keys[l], &state.values[l], rows);
            self.finish_layer(lw, &mut x, &ctx);
        }
        state.tokens += 1;
        let h = layer_norm_row(&x, &self.ln_f, self.eps);
        let mut logits = vec![0.0; self.vocab];
        for (i, &hi) in h.iter().enumerate() {
            for (l, w) in logits.iter_mut().zip(self.head.row(i)) {
                *l += hi * w;
            }
        }
        Ok(softmax_row(&logits))
    }

    fn attend(&self, q: &[f64], keys: &[f64], values: &[f64], rows: usize) -> Vec<f64> {
        let e = self.hidden;
        let d = e / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut ctx = vec![0.0; e];
        for h in 0..self.heads {
            let lo = h * d;
            let scores: Vec<f64> = (0..rows)
                .map(|r| {
                    let k = &keys[r * e + lo..r * e + lo + d];
                    q[lo..lo + d].iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale
                })
                .collect();
            let w = softmax_row(&scores);
            for (r, wr) in w.iter().enumerate() {
                let v = &values[r * e + lo..r * e + lo + d];
                for (c, vi) in ctx[lo..lo + d].iter_mut().zip(v) {
                    *c += wr * vi;
                }
            }
        }
        ctx
    }

    fn finish_layer(&self, lw: &LayerWeights, x: &mut [f64], ctx: &[f64]) {
        let att = affine_row(ctx, &lw.out);
        x.iter_mut().zip(&att).for_each(|(a, b)| *a += b);
        let b = layer_norm_row(x, &lw.ln2, self.eps);
        let mut f = affine_row(&b, &lw.ff0);
        f.iter_mut().for_each(|v| *v = v.max(0.0));
        let f = affine_row(&f, &lw.ff1);
        x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
    }
}

fn affine_row(x: &[f64], (w, b): &(Tensor, Tensor)) -> Vec<f64> {
    let mut out = b.data().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

fn layer_norm_row(x: &[f64], (gamma, beta): &(Tensor, Tensor), eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    let s = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(gamma.data().iter().zip(beta.data()))
        .map(|(v, (g, b))| (v - mu) * s * g + b)
        .collect()
}

fn softmax_row(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|v| v / total).collect()
}
