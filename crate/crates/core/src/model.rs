//! Model configuration and the end-to-end forward pass wiring classifier,
//! expansion and generator together.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, Classifier, Phase, StateOverride};
use crate::corpus::{ReportRecord, Visual};
use crate::error::{Error, Result};
use crate::expansion::{self, indicator_to_words, Expansion, IndicatorTemplates};
use crate::generator::{self, Generator};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::{SubwordVocab, BOS, EOS, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum EncoderConfig {
    TinyConv {
        height: usize,
        width: usize,
        channels: [usize; 2],
    },
    Passthrough,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub indicators: usize,
    pub states: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub feature_dim: usize,
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    pub word_vocab_size: usize,
    pub dropout: f64,
    /// Probability of hiding the visual memory row from the generator for a
    /// whole training record.
    #[serde(default)]
    pub visual_dropout: f64,
    /// Probability of replacing each teacher-forced input token after
    /// `<bos>` by `<unk>` during training.
    #[serde(default)]
    pub token_dropout: f64,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Passthrough-encoder configuration with two layers and four heads.
    pub fn tiny(indicators: usize, states: usize, hidden: usize, vocab_size: usize, word_vocab_size: usize) -> Self {
        ModelConfig {
            indicators,
            states,
            hidden,
            heads: 2,
            layers: 2,
            ff_mult: 4,
            feature_dim: 6,
            encoder: EncoderConfig::Passthrough,
            vocab_size,
            word_vocab_size,
            dropout: 0.0,
            visual_dropout: 0.0,
            token_dropout: 0.0,
            ln_eps: 1e-5,
        }
    }

    /// Default model for images of `height × width`: e=64, Z=2, H=4, F=64,
    /// dropout 0.25 and visual-row dropout 0.5 during training.
    pub fn for_images(indicators: usize, states: usize, height: usize, width: usize, vocab_size: usize, word_vocab_size: usize) -> Self {
        ModelConfig {
            indicators,
            states,
            hidden: 64,
            heads: 4,
            layers: 2,
            ff_mult: 4,
            feature_dim: 64,
            encoder: EncoderConfig::TinyConv {
                height,
                width,
                channels: [8, 16],
            },
            vocab_size,
            word_vocab_size,
            dropout: 0.25,
            visual_dropout: 0.5,
            token_dropout: 0.0,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("indicators", self.indicators),
            ("states", self.states),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ff_mult", self.ff_mult),
            ("feature_dim", self.feature_dim),
            ("vocab_size", self.vocab_size),
            ("word_vocab_size", self.word_vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        let rates = [self.dropout, self.visual_dropout, self.token_dropout];
        if rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        if let EncoderConfig::TinyConv { height, width, channels } = &self.encoder {
            if *height < 4 || *width < 4 || channels.contains(&0) {
                return Err(Error::Config("tiny-conv encoder needs images of at least 4x4".into()));
            }
        }
        Ok(())
    }
}

/// Classifier, expansion and generator parameters plus the vocabularies
/// and templates they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct IihtModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub templates: IndicatorTemplates,
    pub vocab: SubwordVocab,
}

/// Intermediate values of one forward pass.
pub struct Forward {
    pub x: Var,
    pub d: Var,
    pub alpha: Var,
    pub d_hat: Var,
    pub s_hat: Var,
    pub h: Var,
    pub memory: Var,
}

impl IihtModel {
    pub fn new(config: ModelConfig, templates: IndicatorTemplates, vocab: SubwordVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if templates.num_indicators() != config.indicators || templates.num_states() != config.states {
            return Err(Error::Config(format!(
                "templates cover {}x{} but the model expects {}x{}",
                templates.num_indicators(),
                templates.num_states(),
                config.indicators,
                config.states
            )));
        }
        if vocab.len() != config.vocab_size || templates.vocab().len() != config.word_vocab_size {
            return Err(Error::Config("vocabulary sizes disagree with the model config".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        classifier::init_params(&config, &mut params, &mut rng);
        expansion::init_params(&config, &mut params, &mut rng);
        generator::init_params(&config, &mut params, &mut rng);
        Ok(IihtModel {
            config,
            params,
            templates,
            vocab,
        })
    }

    pub fn classifier(&self) -> Classifier<'_> {
        Classifier::new(&self.config, &self.params)
    }

    pub fn expansion(&self) -> Expansion<'_> {
        Expansion::new(&self.config, &self.params)
    }

    pub fn generator(&self) -> Generator<'_> {
        Generator::new(&self.config, &self.params)
    }

    /// Runs classifier and expansion and builds the generator memory.
    ///
    /// `labels` selects the training path of the state substitution; without
    /// them the inference path mixes states by `α` (or by its one-hot argmax
    /// when `hard_states` is set).
    pub fn encode(
        &self,
        g: &Graph,
        visual: &Visual,
        labels: Option<&[Vec<u8>]>,
        overrides: &[StateOverride],
        hard_states: bool,
    ) -> Result<Forward> {
        let clf = self.classifier();
        let x = clf.extract_features(g, visual)?;
        let d = clf.indicator_embeddings(g, x)?;
        let (alpha, d_hat) = clf.state_attention(g, d)?;
        let (phase, mix) = match labels {
            Some(_) => (Phase::Train, alpha),
            None if hard_states => (Phase::Infer, g.constant(classifier::one_hot_rows(&g.value(alpha)))),
            None => (Phase::Infer, alpha),
        };
        let s_hat = clf.state_substitute(g, mix, labels, phase, overrides)?;
        let rows = self.state_rows(&g.value(mix), labels, overrides)?;
        let phrases = rows
            .iter()
            .enumerate()
            .map(|(t, row)| indicator_to_words(&self.templates, t, row))
            .collect::<Result<Vec<_>>>()?;
        let h = self.expansion().encode_all(g, &phrases, s_hat)?;
        let memory = self.generator().memory(g, x, h)?;
        Ok(Forward {
            x,
            d,
            alpha,
            d_hat,
            s_hat,
            h,
            memory,
        })
    }

    /// The state row each indicator is phrased with.
    fn state_rows(&self, alpha: &Tensor, labels: Option<&[Vec<u8>]>, overrides: &[StateOverride]) -> Result<Vec<Vec<f64>>> {
        let t = self.config.indicators;
        let mut rows: Vec<Vec<f64>> = match labels {
            Some(l) => l.iter().map(|r| r.iter().map(|&c| c as f64).collect()).collect(),
            None => (0..t).map(|i| alpha.row(i).to_vec()).collect(),
        };
        for o in overrides {
            let slot = rows
                .get_mut(o.indicator)
                .ok_or_else(|| Error::contract(format!("unknown indicator {}", o.indicator)))?;
            *slot = o.row.clone();
        }
        Ok(rows)
    }

    /// Teacher-forced input and target sequences for a report.
    pub fn teacher_forcing(&self, report: &str) -> (Vec<u32>, Vec<u32>) {
        let ids = self.vocab.encode(report);
        let mut input = Vec::with_capacity(ids.len() + 1);
        input.push(BOS);
        input.extend_from_slice(&ids);
        let mut target = ids;
        target.push(EOS);
        (input, target)
    }

    /// Training-path losses `(L_G, L_C)` for one record. `L_G` is the summed
    /// token cross-entropy of the report and is skipped when `with_generator`
    /// is false.
    pub fn record_losses(
        &self,
        g: &Graph,
        record: &ReportRecord,
        with_generator: bool,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<RecordLosses> {
        let fwd = self.encode(g, &record.visual, Some(&record.labels), &[], false)?;
        let l_c = classifier::multilabel_loss(g, fwd.alpha, &record.labels)?;
        let mut out = RecordLosses {
            l_c,
            l_g: None,
            tokens: 0,
            correct: 0,
            alpha: fwd.alpha,
        };
        if with_generator {
            let (mut input, target) = self.teacher_forcing(&record.report);
            let mut rng = rng;
            if let Some(r) = rng.as_deref_mut() {
                if self.config.token_dropout > 0.0 {
                    for t in input.iter_mut().skip(1) {
                        if r.random::<f64>() < self.config.token_dropout {
                            *t = UNK;
                        }
                    }
                }
            }
            let gen = self.generator();
            let hidden = gen.forward(g, fwd.memory, &input, rng)?;
            let probs = gen.token_distribution(g, hidden)?;
            let p = g.value(probs);
            out.tokens = target.len();
            out.correct = target
                .iter()
                .enumerate()
                .filter(|(i, &t)| classifier::argmax(p.row(*i)) == t as usize)
                .count();
            out.l_g = Some(generator::report_nll(g, probs, &target)?);
        }
        Ok(out)
    }
}

pub struct RecordLosses {
    pub l_c: Var,
    pub l_g: Option<Var>,
    pub tokens: usize,
    pub correct: usize,
    pub alpha: Var,
}
