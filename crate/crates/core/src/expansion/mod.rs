//! Indicator expansion: each (indicator, state) pair becomes a short word
//! phrase, which a bidirectional GRU seeded with the state-aware embedding
//! encodes back into a dense vector `h_t`.

pub mod templates;

use rand::Rng;

pub use templates::IndicatorTemplates;

use crate::classifier::{argmax, check_probability_row};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{affine, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const WORDS: &str = "expansion.words";

pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) {
    let e = cfg.hidden;
    store.insert(WORDS, Tensor::randn(&[cfg.word_vocab_size, e], 1.0 / (e as f64).sqrt(), rng));
    for dir in ["fwd", "bwd"] {
        let std = 1.0 / (e as f64).sqrt();
        store.insert(format!("expansion.gru.{dir}.w_ih"), Tensor::randn(&[e, 3 * e], std, rng));
        store.insert(format!("expansion.gru.{dir}.w_hh"), Tensor::randn(&[e, 3 * e], std, rng));
        store.insert(format!("expansion.gru.{dir}.b_ih"), Tensor::zeros(&[3 * e]));
        store.insert(format!("expansion.gru.{dir}.b_hh"), Tensor::zeros(&[3 * e]));
    }
    store.linear("expansion.combine", 2 * e, e, rng);
    store.linear("expansion.mlp.0", e, e, rng);
    store.linear("expansion.mlp.1", e, e, rng);
}

/// Word ids of the phrase for indicator `t` in the argmax state of `row`.
pub fn indicator_to_words(templates: &IndicatorTemplates, t: usize, row: &[f64]) -> Result<Vec<u32>> {
    if t >= templates.num_indicators() {
        return Err(Error::contract(format!("unknown indicator id {t}")));
    }
    check_probability_row(row, templates.num_states())?;
    let m = argmax(row);
    templates
        .phrase(t, m)
        .iter()
        .map(|w| {
            templates
                .vocab()
                .id(w)
                .ok_or_else(|| Error::contract(format!("word {w:?} missing from indicator vocabulary")))
        })
        .collect()
}

pub struct Expansion<'a> {
    cfg: &'a ModelConfig,
    params: &'a ParamStore,
}

impl<'a> Expansion<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParamStore) -> Self {
        Expansion { cfg, params }
    }

    /// Encodes one phrase into `h_t`, `[1, e]`. `s_hat` is the `[1, e]` seed.
    pub fn encode_indicator(&self, g: &Graph, words: &[u32], s_hat: Var) -> Result<Var> {
        if words.is_empty() {
            return Err(Error::contract("empty indicator phrase"));
        }
        let ids: Vec<usize> = words.iter().map(|&w| w as usize).collect();
        let table = self.params.bind(g, WORDS)?;
        let emb = g.embedding(table, &ids)?;
        let fwd = self.run_gru(g, "fwd", emb, s_hat, false)?;
        let bwd = self.run_gru(g, "bwd", emb, s_hat, true)?;
        let both = g.concat(&[fwd, bwd], 1)?;
        let h_k = affine(self.params, g, "expansion.combine", both)?;
        let u = g.add(s_hat, h_k)?;
        let hidden = g.tanh(affine(self.params, g, "expansion.mlp.0", u)?);
        affine(self.params, g, "expansion.mlp.1", hidden)
    }

    /// Encodes every indicator row of `s_hat` (`[T, e]`) into `[T, e]`.
    pub fn encode_all(&self, g: &Graph, phrases: &[Vec<u32>], s_hat: Var) -> Result<Var> {
        let rows = phrases
            .iter()
            .enumerate()
            .map(|(t, words)| {
                let seed = g.slice(s_hat, 0, t, 1)?;
                self.encode_indicator(g, words, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat(&rows, 0)
    }

    /// Runs one GRU direction over `[K, e]` inputs and returns the final state.
    fn run_gru(&self, g: &Graph, dir: &str, inputs: Var, h0: Var, reverse: bool) -> Result<Var> {
        let e = self.cfg.hidden;
        let p = |name: &str| self.params.bind(g, &format!("expansion.gru.{dir}.{name}"));
        let (w_ih, w_hh, b_ih, b_hh) = (p("w_ih")?, p("w_hh")?, p("b_ih")?, p("b_hh")?);
        let projected = g.add(g.matmul(inputs, w_ih)?, b_ih)?;
        let steps = g.shape(inputs)[0];
        let mut h = h0;
        for k in 0..steps {
            let k = if reverse { steps - 1 - k } else { k };
            let xi = g.slice(projected, 0, k, 1)?;
            let hh = g.add(g.matmul(h, w_hh)?, b_hh)?;
            let gate = |v: Var, i: usize| g.slice(v, 1, i * e, e);
            let r = g.sigmoid(g.add(gate(xi, 0)?, gate(hh, 0)?)?);
            let z = g.sigmoid(g.add(gate(xi, 1)?, gate(hh, 1)?)?);
            let n = g.tanh(g.add(gate(xi, 2)?, g.mul(r, gate(hh, 2)?)?)?);
            h = g.add(n, g.mul(z, g.sub(h, n)?)?)?;
        }
        Ok(h)
    }
}
