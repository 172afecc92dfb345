//! Visual encoder, per-indicator projections and attention over state
//! embeddings.
//!
//! Matrices here are row-major with one row per indicator: `D` and `ŝ` are
//! `[T, e]`, `α` is `[T, M]` and the state embedding table `S` is `[e, M]`
//! so that column `m` is `s_m`.

use rand::Rng;

use crate::corpus::{Image, Visual};
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, ModelConfig};
use crate::params::{affine, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const STATES: &str = "classifier.states";
pub const LOG_FLOOR: f64 = 1e-12;

/// Which Eq-6 path builds the state-aware embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Replaces the state row of one indicator.
#[derive(Clone, Debug, PartialEq)]
pub struct StateOverride {
    pub indicator: usize,
    pub row: Vec<f64>,
}

impl StateOverride {
    pub fn one_hot(indicator: usize, state: usize, states: usize) -> Self {
        let mut row = vec![0.0; states];
        row[state] = 1.0;
        StateOverride { indicator, row }
    }
}

pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) {
    if let EncoderConfig::TinyConv {
        height,
        width,
        channels,
    } = &cfg.encoder
    {
        let [c1, c2] = *channels;
        store.linear("classifier.encoder.conv1", 9, c1, rng);
        store.linear("classifier.encoder.conv2", 9 * c1, c2, rng);
        let cells = (height / 4) * (width / 4);
        store.linear("classifier.encoder.out", cells * c2, cfg.feature_dim, rng);
    }
    let e = cfg.hidden;
    let f = cfg.feature_dim;
    for t in 0..cfg.indicators {
        let std = 1.0 / (f as f64).sqrt();
        store.insert(format!("classifier.proj.{t}.weight"), Tensor::randn(&[f, e], std, rng));
        store.insert(format!("classifier.proj.{t}.bias"), Tensor::zeros(&[e]));
    }
    let std = 1.0 / (e as f64).sqrt();
    store.insert(STATES, Tensor::randn(&[e, cfg.states], std, rng));
}

/// Checks that `row` is a probability vector of length `m`.
pub fn check_probability_row(row: &[f64], m: usize) -> Result<()> {
    if row.len() != m {
        return Err(Error::contract(format!(
            "state row has {} entries, expected {m}",
            row.len()
        )));
    }
    let sum: f64 = row.iter().sum();
    if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("state row {row:?} is not a probability vector")));
    }
    Ok(())
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub struct Classifier<'a> {
    cfg: &'a ModelConfig,
    params: &'a ParamStore,
}

impl<'a> Classifier<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParamStore) -> Self {
        Classifier { cfg, params }
    }

    /// Encodes every view and merges them by elementwise max. Returns `[1, F]`.
    pub fn extract_features(&self, g: &Graph, visual: &Visual) -> Result<Var> {
        match (visual, &self.cfg.encoder) {
            (Visual::Features(f), EncoderConfig::Passthrough) => {
                if f.len() != self.cfg.feature_dim {
                    return Err(Error::Shape {
                        op: "extract_features",
                        lhs: vec![f.len()],
                        rhs: vec![self.cfg.feature_dim],
                    });
                }
                Ok(g.constant(Tensor::new(vec![1, f.len()], f.clone())?))
            }
            (Visual::Images(images), EncoderConfig::TinyConv { height, width, .. }) => {
                if images.is_empty() {
                    return Err(Error::contract("record has no images"));
                }
                let mut merged: Option<Var> = None;
                for img in images {
                    if (img.h, img.w) != (*height, *width) {
                        return Err(Error::Shape {
                            op: "extract_features",
                            lhs: vec![img.h, img.w],
                            rhs: vec![*height, *width],
                        });
                    }
                    let x = self.encode_image(g, img)?;
                    merged = Some(match merged {
                        None => x,
                        Some(m) => g.maximum(m, x)?,
                    });
                }
                Ok(merged.expect("at least one image"))
            }
            (Visual::Features(_), _) => Err(Error::contract(
                "record carries features but the model expects images",
            )),
            (Visual::Images(_), _) => Err(Error::contract(
                "record carries images but the model expects features",
            )),
        }
    }

    fn encode_image(&self, g: &Graph, img: &Image) -> Result<Var> {
        let p = self.params;
        let (h, w) = (img.h, img.w);
        let input = g.constant(Tensor::new(vec![h * w, 1], img.pixels.clone())?);
        let c1 = conv3x3(g, p, "classifier.encoder.conv1", input, h, w, 1)?;
        let c1 = avg_pool2(g, g.relu(c1), h, w)?;
        let (h, w) = (h / 2, w / 2);
        let cin = g.shape(c1)[1];
        let c2 = conv3x3(g, p, "classifier.encoder.conv2", c1, h, w, cin)?;
        let c2 = avg_pool2(g, g.relu(c2), h, w)?;
        let flat = g.reshape(c2, &[1, g.value(c2).len()])?;
        affine(p, g, "classifier.encoder.out", flat)
    }

    /// `d_t = W_tᵀx + b_t` stacked as rows, `[T, e]`.
    pub fn indicator_embeddings(&self, g: &Graph, x: Var) -> Result<Var> {
        let rows = (0..self.cfg.indicators)
            .map(|t| affine(self.params, g, &format!("classifier.proj.{t}"), x))
            .collect::<Result<Vec<_>>>()?;
        g.concat(&rows, 0)
    }

    /// Returns `(α, d̂)`: softmax over states of `D·S` and `α·Sᵀ`.
    pub fn state_attention(&self, g: &Graph, d: Var) -> Result<(Var, Var)> {
        let s = self.params.bind(g, STATES)?;
        let alpha = g.softmax(g.matmul(d, s)?, 1)?;
        let d_hat = g.matmul(alpha, g.transpose(s)?)?;
        Ok((alpha, d_hat))
    }

    /// State-aware indicator embeddings `[T, e]`.
    ///
    /// The training path mixes state embeddings with the labels, the inference
    /// path with `α`. Overridden rows use the supplied row in either phase.
    pub fn state_substitute(
        &self,
        g: &Graph,
        alpha: Var,
        labels: Option<&[Vec<u8>]>,
        phase: Phase,
        overrides: &[StateOverride],
    ) -> Result<Var> {
        let (t_count, m) = (self.cfg.indicators, self.cfg.states);
        let mut fixed = vec![0.0; t_count * m];
        let mut keep = vec![1.0; t_count * m];
        for o in overrides {
            if o.indicator >= t_count {
                return Err(Error::contract(format!("unknown indicator {}", o.indicator)));
            }
            check_probability_row(&o.row, m)?;
            fixed[o.indicator * m..(o.indicator + 1) * m].copy_from_slice(&o.row);
            keep[o.indicator * m..(o.indicator + 1) * m].fill(0.0);
        }
        let weights = match phase {
            Phase::Train => {
                let labels = labels.ok_or_else(|| Error::contract("training path needs labels"))?;
                let c = label_matrix(labels, t_count, m)?;
                let mut data = c.into_vec();
                for (d, (k, f)) in data.iter_mut().zip(keep.iter().zip(&fixed)) {
                    if *k == 0.0 {
                        *d = *f;
                    }
                }
                g.constant(Tensor::from_parts(vec![t_count, m], data))
            }
            Phase::Infer if overrides.is_empty() => alpha,
            Phase::Infer => {
                let keep = g.constant(Tensor::from_parts(vec![t_count, m], keep));
                let fixed = g.constant(Tensor::from_parts(vec![t_count, m], fixed));
                g.add(g.mul(alpha, keep)?, fixed)?
            }
        };
        let s = self.params.bind(g, STATES)?;
        g.matmul(weights, g.transpose(s)?)
    }
}

/// Multi-label loss `-(1/T) Σ c log α` with the log clamped at 1e-12.
pub fn multilabel_loss(g: &Graph, alpha: Var, labels: &[Vec<u8>]) -> Result<Var> {
    let shape = g.shape(alpha);
    let c = g.constant(label_matrix(labels, shape[0], shape[1])?);
    let ll = g.sum(g.mul(c, g.clamped_log(alpha, LOG_FLOOR))?);
    Ok(g.scale(ll, -1.0 / shape[0] as f64))
}

pub fn label_matrix(labels: &[Vec<u8>], t: usize, m: usize) -> Result<Tensor> {
    if labels.len() != t || labels.iter().any(|r| r.len() != m) {
        return Err(Error::contract(format!(
            "labels must be {t}x{m}, got {} rows",
            labels.len()
        )));
    }
    let data = labels.iter().flatten().map(|&c| c as f64).collect();
    Ok(Tensor::from_parts(vec![t, m], data))
}

/// Replaces each row of `alpha` by the one-hot vector of its argmax.
pub fn one_hot_rows(alpha: &Tensor) -> Tensor {
    let m = alpha.shape()[1];
    let mut out = vec![0.0; alpha.len()];
    for t in 0..alpha.shape()[0] {
        out[t * m + argmax(alpha.row(t))] = 1.0;
    }
    Tensor::from_parts(alpha.shape().to_vec(), out)
}

/// 3×3 same-padding convolution of a `[h·w, cin]` map via an im2col gather.
fn conv3x3(g: &Graph, p: &ParamStore, prefix: &str, x: Var, h: usize, w: usize, cin: usize) -> Result<Var> {
    let mut index = Vec::with_capacity(h * w * 9 * cin);
    for i in 0..h as isize {
        for j in 0..w as isize {
            for di in -1..=1 {
                for dj in -1..=1 {
                    let (r, c) = (i + di, j + dj);
                    let inside = r >= 0 && c >= 0 && r < h as isize && c < w as isize;
                    for ch in 0..cin {
                        index.push(inside.then(|| (r as usize * w + c as usize) * cin + ch));
                    }
                }
            }
        }
    }
    let cols = g.gather(x, index, &[h * w, 9 * cin])?;
    affine(p, g, prefix, cols)
}

/// 2×2 average pooling of a `[h·w, c]` map; odd trailing rows and columns are dropped.
fn avg_pool2(g: &Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let (ho, wo) = (h / 2, w / 2);
    let mut pool = vec![0.0; ho * wo * h * w];
    for i in 0..ho {
        for j in 0..wo {
            let row = (i * wo + j) * h * w;
            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                pool[row + (2 * i + di) * w + 2 * j + dj] = 0.25;
            }
        }
    }
    let pool = g.constant(Tensor::from_parts(vec![ho * wo, h * w], pool));
    g.matmul(pool, x)
}
