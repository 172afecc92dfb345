//! Report generation: predicted (or overridden) states, expansion, then
//! greedy or beam decoding.

use std::cmp::Ordering;

use crate::classifier::{argmax, StateOverride};
use crate::corpus::{ReportRecord, Visual};
use crate::error::{Error, Result};
use crate::generator::{DecodeState, IncrementalDecoder};
use crate::metrics::EvalReport;
use crate::model::IihtModel;
use crate::tensor::{Graph, Tensor};
use crate::tokenizer::{BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Keeps the `width` best prefixes by total log-probability. With
    /// `length_norm` finished hypotheses are ranked by mean log-probability.
    Beam { width: usize, length_norm: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub mode: DecodeMode,
    pub max_len: usize,
    pub overrides: Vec<StateOverride>,
    /// Mix state embeddings with the one-hot argmax of `α` instead of `α`.
    pub hard_states: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            mode: DecodeMode::Greedy,
            max_len: 160,
            overrides: Vec::new(),
            hard_states: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    /// Generated ids, without `<bos>`, ending with `<eos>` unless the length
    /// limit was reached.
    pub tokens: Vec<u32>,
    pub text: String,
    /// Distribution each token was chosen from.
    pub step_probs: Vec<Vec<f64>>,
    pub alpha: Tensor,
    pub overrides: Vec<StateOverride>,
    pub log_prob: f64,
}

/// Classifier confidences `α` (`[T, M]`) and the per-indicator argmax.
pub fn predict_states(model: &IihtModel, visual: &Visual) -> Result<(Tensor, Vec<usize>)> {
    let g = Graph::new();
    let clf = model.classifier();
    let x = clf.extract_features(&g, visual)?;
    let d = clf.indicator_embeddings(&g, x)?;
    let (alpha, _) = clf.state_attention(&g, d)?;
    let alpha = g.value(alpha);
    let states = (0..alpha.shape()[0]).map(|t| argmax(alpha.row(t))).collect();
    Ok((alpha, states))
}

/// Inference-path generator memory for a record plus its `α`.
pub fn inference_memory(model: &IihtModel, visual: &Visual, overrides: &[StateOverride], hard_states: bool) -> Result<(Tensor, Tensor)> {
    let g = Graph::new();
    let fwd = model.encode(&g, visual, None, overrides, hard_states)?;
    Ok((g.value(fwd.memory), g.value(fwd.alpha)))
}

pub fn generate(model: &IihtModel, visual: &Visual, opts: &GenerateOptions) -> Result<GenerationResult> {
    if opts.max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let (memory, alpha) = inference_memory(model, visual, &opts.overrides, opts.hard_states)?;
    let decoder = IncrementalDecoder::new(&model.config, &model.params)?;
    let hyp = match opts.mode {
        DecodeMode::Greedy => greedy(&decoder, &memory, opts.max_len)?,
        DecodeMode::Beam { width, length_norm } => beam(&decoder, &memory, opts.max_len, width, length_norm)?,
    };
    Ok(GenerationResult {
        text: model.vocab.decode(&hyp.tokens),
        tokens: hyp.tokens,
        step_probs: hyp.step_probs,
        alpha,
        overrides: opts.overrides.clone(),
        log_prob: hyp.log_prob,
    })
}

/// Decodes every record and scores the reports and the predicted states
/// against the references.
pub fn evaluate(model: &IihtModel, records: &[ReportRecord], opts: &GenerateOptions) -> Result<EvalReport> {
    let mut candidates = Vec::with_capacity(records.len());
    let mut predicted = Vec::with_capacity(records.len());
    for r in records {
        let out = generate(model, &r.visual, opts)?;
        predicted.push((0..out.alpha.shape()[0]).map(|t| argmax(out.alpha.row(t))).collect());
        candidates.push(out.text);
    }
    let references: Vec<String> = records.iter().map(|r| r.report.clone()).collect();
    let labels: Vec<Vec<usize>> = records.iter().map(ReportRecord::states).collect();
    EvalReport::compute(&candidates, &references, &predicted, &labels, model.config.states)
}

/// A decoded sequence with its scores.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub step_probs: Vec<Vec<f64>>,
    pub log_prob: f64,
}

impl Hypothesis {
    fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    fn score(&self, length_norm: bool) -> f64 {
        if length_norm {
            self.log_prob / self.tokens.len().max(1) as f64
        } else {
            self.log_prob
        }
    }
}

/// Tokens that may be emitted: everything except `<pad>` and `<bos>`.
fn allowed(token: usize) -> bool {
    token != PAD as usize && token != BOS as usize
}

/// Picks the most probable allowed token; the lowest id wins ties.
fn best_token(p: &[f64]) -> usize {
    let mut best: Option<usize> = None;
    for (i, &v) in p.iter().enumerate() {
        if allowed(i) && best.is_none_or(|b| v > p[b]) {
            best = Some(i);
        }
    }
    best.expect("vocabulary has emittable tokens")
}

pub fn greedy(decoder: &IncrementalDecoder, memory: &Tensor, max_len: usize) -> Result<Hypothesis> {
    let mut state = decoder.start(memory)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        step_probs: Vec::new(),
        log_prob: 0.0,
    };
    let mut p = decoder.step(&mut state, BOS)?;
    while hyp.tokens.len() < max_len {
        let t = best_token(&p);
        hyp.log_prob += p[t].ln();
        hyp.tokens.push(t as u32);
        hyp.step_probs.push(p);
        if t as u32 == EOS || hyp.tokens.len() == max_len {
            break;
        }
        p = decoder.step(&mut state, t as u32)?;
    }
    Ok(hyp)
}

/// Higher score first, then lexicographically smaller token sequence.
fn rank(a: &Hypothesis, b: &Hypothesis, length_norm: bool) -> Ordering {
    b.score(length_norm)
        .partial_cmp(&a.score(length_norm))
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

pub fn beam(decoder: &IncrementalDecoder, memory: &Tensor, max_len: usize, width: usize, length_norm: bool) -> Result<Hypothesis> {
    if width == 0 {
        return Err(Error::contract("beam width must be at least 1"));
    }
    let mut state = decoder.start(memory)?;
    let first = decoder.step(&mut state, BOS)?;
    // Live beams carry their cache and the distribution for the next token.
    let mut live: Vec<(Hypothesis, DecodeState, Vec<f64>)> = vec![(
        Hypothesis {
            tokens: Vec::new(),
            step_probs: Vec::new(),
            log_prob: 0.0,
        },
        state,
        first,
    )];
    let mut done: Vec<Hypothesis> = Vec::new();
    for len in 1..=max_len {
        let mut candidates: Vec<(Hypothesis, usize)> = Vec::new();
        for (bi, (hyp, _, p)) in live.iter().enumerate() {
            for (t, &pt) in p.iter().enumerate() {
                if !allowed(t) {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(t as u32);
                candidates.push((
                    Hypothesis {
                        tokens,
                        step_probs: Vec::new(),
                        log_prob: hyp.log_prob + pt.ln(),
                    },
                    bi,
                ));
            }
        }
        candidates.extend(done.drain(..).map(|h| (h, usize::MAX)));
        candidates.sort_by(|a, b| rank(&a.0, &b.0, length_norm));
        candidates.truncate(width);

        let mut next = Vec::new();
        for (mut hyp, bi) in candidates {
            if bi == usize::MAX {
                done.push(hyp);
                continue;
            }
            let (parent, parent_state, p) = &live[bi];
            hyp.step_probs = parent.step_probs.clone();
            hyp.step_probs.push(p.clone());
            if hyp.finished() || len == max_len {
                done.push(hyp);
            } else {
                let mut st = parent_state.clone();
                let p = decoder.step(&mut st, *hyp.tokens.last().expect("non-empty"))?;
                next.push((hyp, st, p));
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    done.sort_by(|a, b| rank(a, b, length_norm));
    Ok(done.into_iter().next().expect("beam produced a hypothesis"))
}
