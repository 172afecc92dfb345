//! Joint optimisation of the blended loss with AdamW, checkpointing and the
//! per-epoch metrics log.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::argmax;
use crate::corpus::ReportRecord;
use crate::error::{Error, Result};
use crate::expansion::IndicatorTemplates;
use crate::model::{IihtModel, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::SubwordVocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::toy()
    }
}

impl TrainConfig {
    /// Settings for from-scratch training on the synthetic corpus.
    pub fn toy() -> Self {
        TrainConfig {
            lambda: 0.5,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 2,
            epochs: 200,
            seed: 0,
            clip_norm: Some(1.0),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// The published hyperparameters.
    pub fn paper() -> Self {
        TrainConfig {
            learning_rate: 1e-6,
            batch_size: 8,
            epochs: 300,
            ..TrainConfig::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate must be positive and decay non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// `λ·L_G + (1−λ)·L_C`. At the endpoints the unused term is left out of the
/// graph entirely, so it contributes no gradient.
pub fn total_loss(g: &Graph, l_g: Option<Var>, l_c: Option<Var>, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let need = |v: Option<Var>, name: &str| v.ok_or_else(|| Error::contract(format!("{name} missing for lambda {lambda}")));
    if lambda == 1.0 {
        return need(l_g, "L_G");
    }
    if lambda == 0.0 {
        return need(l_c, "L_C");
    }
    let a = g.scale(need(l_g, "L_G")?, lambda);
    let b = g.scale(need(l_c, "L_C")?, 1.0 - lambda);
    g.add(a, b)
}

/// AdamW optimiser state: first and second moments and a step count per
/// parameter path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub steps: BTreeMap<String, u64>,
}

impl AdamW {
    /// Applies one update for every parameter present in `grads`. Parameters
    /// without a gradient are left untouched, decay included. Nothing is
    /// updated if any gradient entry is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, cfg: &TrainConfig) -> Result<()> {
        for (path, g) in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(path.clone()));
            }
            let n = params.get(path)?.len();
            if g.len() != n {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: vec![n],
                    rhs: vec![g.len()],
                });
            }
        }
        let lr = cfg.learning_rate;
        for (path, g) in grads {
            let w = params.get(path)?;
            let m = self.m.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let t = self.steps.entry(path.clone()).or_insert(0);
            *t += 1;
            let c1 = 1.0 - cfg.beta1.powi(*t as i32);
            let c2 = 1.0 - cfg.beta2.powi(*t as i32);
            let mut out = w.data().to_vec();
            for i in 0..out.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                out[i] -= lr * cfg.weight_decay * out[i];
                out[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            let shape = w.shape().to_vec();
            params.set(path, Tensor::new(shape, out)?)?;
        }
        Ok(())
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|x| *x *= s);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean summed report cross-entropy on the training split.
    #[serde(rename = "L_G")]
    pub l_g: f64,
    #[serde(rename = "L_C")]
    pub l_c: f64,
    /// Validation state accuracy over all indicators.
    pub state_acc: f64,
    #[serde(skip)]
    pub token_nll: f64,
    #[serde(skip)]
    pub token_acc: f64,
}

pub const CSV_HEADER: &str = "epoch,train_loss,val_loss,L_G,L_C,state_acc";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.val_loss, self.l_g, self.l_c, self.state_acc
        )
    }
}

pub fn write_metrics_csv(log: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in log {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::file(path, e))
}

/// Loss sums over a set of records.
#[derive(Clone, Copy, Debug, Default)]
struct Totals {
    loss: f64,
    l_g: f64,
    l_c: f64,
    tokens: usize,
    correct: usize,
    states: usize,
    states_correct: usize,
    records: usize,
}

/// Optimisation state that persists across epochs.
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            config,
            optimizer: AdamW::default(),
            rng,
            step: 0,
            epoch: 0,
        })
    }

    /// Resumes from a checkpoint's optimiser state.
    pub fn resume(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        t.optimizer = ckpt.optimizer.clone();
        t.rng = ckpt.rng.clone();
        t.step = ckpt.step;
        t.epoch = ckpt.epoch;
        Ok(t)
    }

    /// One pass over `train` followed by evaluation on `val`. On a non-finite
    /// loss or gradient the model and optimiser are restored to their state
    /// at the start of the epoch and the error is returned.
    pub fn run_epoch(&mut self, model: &mut IihtModel, train: &[ReportRecord], val: &[ReportRecord]) -> Result<EpochMetrics> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("training and validation splits must be nonempty".into()));
        }
        let snapshot = (model.params.clone(), self.optimizer.clone(), self.rng.clone(), self.step);
        match self.epoch_inner(model, train, val) {
            Ok(m) => Ok(m),
            Err(e) => {
                warn!("epoch {} aborted: {e}", self.epoch + 1);
                model.params = snapshot.0;
                self.optimizer = snapshot.1;
                self.rng = snapshot.2;
                self.step = snapshot.3;
                Err(e)
            }
        }
    }

    fn epoch_inner(&mut self, model: &mut IihtModel, train: &[ReportRecord], val: &[ReportRecord]) -> Result<EpochMetrics> {
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut totals = Totals::default();
        let mut batch_losses = Vec::new();
        for batch in order.chunks(self.config.batch_size) {
            let records: Vec<&ReportRecord> = batch.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = self.batch_gradients(model, &records, &mut totals)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("non-finite loss at step {}", self.step + 1),
                });
            }
            let mut grads = grads;
            if let Some(c) = self.config.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            self.optimizer.step(&mut model.params, &grads, &self.config)?;
            self.step += 1;
            batch_losses.push(loss);
        }
        let val_totals = evaluate_losses(model, val, self.config.lambda)?;
        if !val_totals.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: "non-finite validation loss".into(),
            });
        }
        self.epoch = epoch;
        let n = totals.records as f64;
        let metrics = EpochMetrics {
            epoch,
            train_loss: batch_losses.iter().sum::<f64>() / batch_losses.len() as f64,
            val_loss: val_totals.loss / val_totals.records as f64,
            l_g: totals.l_g / n,
            l_c: totals.l_c / n,
            state_acc: val_totals.states_correct as f64 / val_totals.states as f64,
            token_nll: if totals.tokens > 0 { totals.l_g / totals.tokens as f64 } else { f64::NAN },
            token_acc: if totals.tokens > 0 {
                totals.correct as f64 / totals.tokens as f64
            } else {
                f64::NAN
            },
        };
        info!(
            "epoch {epoch}: train {:.5} val {:.5} L_G {:.5} L_C {:.5} state_acc {:.4}",
            metrics.train_loss, metrics.val_loss, metrics.l_g, metrics.l_c, metrics.state_acc
        );
        Ok(metrics)
    }

    /// Mean blended loss over the batch and its parameter gradients.
    fn batch_gradients(
        &mut self,
        model: &IihtModel,
        records: &[&ReportRecord],
        totals: &mut Totals,
    ) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
        let lambda = self.config.lambda;
        let scale = 1.0 / records.len() as f64;
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut batch_loss = 0.0;
        for record in records {
            let g = Graph::new();
            let mut dropout_rng = (model.config.dropout > 0.0 || model.config.visual_dropout > 0.0 || model.config.token_dropout > 0.0).then(|| ChaCha8Rng::seed_from_u64(self.rng.random()));
            let rng = dropout_rng.as_mut().map(|r| r as &mut dyn RngCore);
            let losses = model.record_losses(&g, record, lambda > 0.0, rng)?;
            let l_c = (lambda < 1.0).then_some(losses.l_c);
            let loss = total_loss(&g, losses.l_g, l_c, lambda)?;
            let loss = g.scale(loss, scale);
            batch_loss += g.value(loss).item();
            totals.record(&g, &losses, record, lambda);
            g.backward(loss)?;
            for (path, grad) in g.param_grads() {
                match grads.get_mut(&path) {
                    Some(acc) => acc.iter_mut().zip(grad.data()).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(path, grad.into_vec());
                    }
                }
            }
        }
        Ok((batch_loss, grads))
    }

    pub fn checkpoint(&self, model: &IihtModel) -> Checkpoint {
        Checkpoint {
            model: model.clone(),
            train_config: self.config.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            epoch: self.epoch,
            rng: self.rng.clone(),
        }
    }
}

impl Totals {
    fn record(&mut self, g: &Graph, losses: &crate::model::RecordLosses, record: &ReportRecord, lambda: f64) {
        let l_c = g.value(losses.l_c).item();
        let l_g = losses.l_g.map_or(0.0, |v| g.value(v).item());
        self.l_c += l_c;
        self.l_g += l_g;
        self.loss += lambda * l_g + (1.0 - lambda) * l_c;
        self.tokens += losses.tokens;
        self.correct += losses.correct;
        self.records += 1;
        let alpha = g.value(losses.alpha);
        for (t, row) in record.labels.iter().enumerate() {
            self.states += 1;
            if row[argmax(alpha.row(t))] == 1 {
                self.states_correct += 1;
            }
        }
    }
}

fn evaluate_losses(model: &IihtModel, records: &[ReportRecord], lambda: f64) -> Result<Totals> {
    let mut totals = Totals::default();
    for record in records {
        let g = Graph::new();
        let losses = model.record_losses(&g, record, lambda > 0.0, None)?;
        totals.record(&g, &losses, record, lambda);
    }
    Ok(totals)
}

/// Teacher-forced next-token accuracy and mean per-token cross-entropy.
pub fn teacher_forced_accuracy(model: &IihtModel, records: &[ReportRecord]) -> Result<(f64, f64)> {
    let t = evaluate_losses(model, records, 1.0)?;
    Ok((t.correct as f64 / t.tokens as f64, t.l_g / t.tokens as f64))
}

/// Trains for `config.epochs` epochs and returns the per-epoch log.
pub fn train(model: &mut IihtModel, train: &[ReportRecord], val: &[ReportRecord], config: &TrainConfig) -> Result<(Vec<EpochMetrics>, Trainer)> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        log.push(trainer.run_epoch(model, train, val)?);
    }
    Ok((log, trainer))
}

/// Index splits for `k`-fold cross-validation over `n` records. Every record
/// appears in exactly one validation fold.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || k > n {
        return Err(Error::Config(format!("cannot split {n} records into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k)
        .map(|f| {
            let (lo, hi) = (f * n / k, (f + 1) * n / k);
            let val = order[lo..hi].to_vec();
            let train = order[..lo].iter().chain(&order[hi..]).copied().collect();
            (train, val)
        })
        .collect())
}

// ----- checkpoints ----------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IIHT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: IihtModel,
    pub train_config: TrainConfig,
    pub optimizer: AdamW,
    pub step: u64,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    templates: String,
    vocab: String,
    merges: String,
    adam_steps: BTreeMap<String, u64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = Meta {
            model: self.model.config.clone(),
            train: self.train_config.clone(),
            epoch: self.epoch,
            templates: self.model.templates.to_text(),
            vocab: self.model.vocab.vocab_lines(),
            merges: self.model.vocab.merge_lines(),
            adam_steps: self.optimizer.steps.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        put_bytes(&mut out, &json);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());

        let mut records: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for (path, t) in self.model.params.iter() {
            records.push((path.clone(), t.shape().to_vec(), t.data()));
        }
        for (prefix, map) in [("adam.m/", &self.optimizer.m), ("adam.v/", &self.optimizer.v)] {
            for (path, data) in map {
                records.push((format!("{prefix}{path}"), vec![data.len()], data));
            }
        }
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (path, shape, data) in records {
            put_bytes(&mut out, path.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let magic = take(&mut r, 4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let json_len = read_u32(&mut r)? as usize;
        let meta: Meta = serde_json::from_slice(take(&mut r, json_len)?)?;
        let step = read_u64(&mut r)?;
        let seed: [u8; 32] = take(&mut r, 32)?.try_into().expect("32 bytes");
        let stream = read_u64(&mut r)?;
        let word_pos = u128::from_le_bytes(take(&mut r, 16)?.try_into().expect("16 bytes"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let mut params = ParamStore::new();
        let mut optimizer = AdamW {
            steps: meta.adam_steps,
            ..AdamW::default()
        };
        let count = read_u32(&mut r)?;
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let path = String::from_utf8(take(&mut r, len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter path is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = take(&mut r, n * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if let Some(p) = path.strip_prefix("adam.m/") {
                optimizer.m.insert(p.to_string(), data);
            } else if let Some(p) = path.strip_prefix("adam.v/") {
                optimizer.v.insert(p.to_string(), data);
            } else {
                params.insert(path, Tensor::new(shape, data)?);
            }
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        let templates = IndicatorTemplates::from_text(&meta.templates)?;
        let vocab = SubwordVocab::from_lines(&meta.vocab, &meta.merges)?;
        let reference = IihtModel::new(meta.model.clone(), templates.clone(), vocab.clone(), 0)?;
        for (path, t) in reference.params.iter() {
            let got = params.get(path).map_err(|_| Error::Checkpoint(format!("missing parameter {path}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("parameter {path} has shape {:?}", got.shape())));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(Checkpoint {
            model: IihtModel {
                config: meta.model,
                params,
                templates,
                vocab,
            },
            train_config: meta.train,
            optimizer,
            step,
            epoch: meta.epoch,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::file(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r, 8)?.try_into().expect("8 bytes")))
}
