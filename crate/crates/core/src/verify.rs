//! Finite-difference gradient suite covering every autodiff op and the
//! composite losses built from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::multilabel_loss;
use crate::corpus::{ReportRecord, Visual};
use crate::error::Result;
use crate::expansion::IndicatorTemplates;
use crate::generator::{self, generator_loss, Generator};
use crate::model::{IihtModel, ModelConfig};
use crate::params::{gradcheck_store, ParamStore};
use crate::tensor::gradcheck::{self, GradCheckReport, STEP};
use crate::tensor::Tensor;
use crate::tokenizer::train_bpe;
use crate::training::total_loss;

pub struct SuiteEntry {
    pub name: String,
    pub instances: usize,
    pub report: GradCheckReport,
}

/// Instances per autodiff op.
pub const OP_INSTANCES: usize = 100;
/// Instances of the classifier loss on random confidences.
pub const CLASSIFIER_INSTANCES: usize = 100;
/// Fresh random generators checked over all parameters.
pub const GENERATOR_INSTANCES: usize = 10;
/// Fresh random end-to-end models checked over all parameters.
pub const TOTAL_INSTANCES: usize = 5;

fn one_hot_labels(rng: &mut ChaCha8Rng, t: usize, m: usize) -> Vec<Vec<u8>> {
    (0..t)
        .map(|_| {
            let hot = rng.random_range(0..m);
            (0..m).map(|j| u8::from(j == hot)).collect()
        })
        .collect()
}

fn classifier_suite(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut agg = GradCheckReport::default();
    for _ in 0..CLASSIFIER_INSTANCES {
        let (t, m) = (rng.random_range(1..5), rng.random_range(2..5));
        let labels = one_hot_labels(rng, t, m);
        let logits = Tensor::randn(&[t, m], 1.0, rng);
        let report = gradcheck::check(
            &[logits],
            |g, v| {
                let alpha = g.softmax(v[0], 1)?;
                multilabel_loss(g, alpha, &labels)
            },
            STEP,
        )?;
        agg.merge(&report);
    }
    Ok(agg)
}

fn generator_suite(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut agg = GradCheckReport::default();
    for _ in 0..GENERATOR_INSTANCES {
        let t = rng.random_range(1..4);
        let v = rng.random_range(6..10);
        let mut cfg = ModelConfig::tiny(t, 3, 4, v, 4);
        cfg.layers = rng.random_range(1..3);
        cfg.feature_dim = 3;
        let mut store = ParamStore::new();
        generator::init_params(&cfg, &mut store, rng);
        let x = Tensor::randn(&[1, 3], 1.0, rng);
        let h = Tensor::randn(&[t, 4], 1.0, rng);
        let len = rng.random_range(1..5);
        let reports: Vec<(Vec<u32>, Vec<u32>)> = (0..2)
            .map(|_| {
                let target: Vec<u32> = (0..len).map(|_| rng.random_range(3..v as u32)).collect();
                let mut input = vec![crate::tokenizer::BOS];
                input.extend_from_slice(&target[..len - 1]);
                (input, target)
            })
            .collect();
        let report = gradcheck_store(
            &store,
            |g, p| {
                let gen = Generator::new(&cfg, p);
                let mem = gen.memory(g, g.constant(x.clone()), g.constant(h.clone()))?;
                let mut probs = Vec::new();
                for (input, _) in &reports {
                    let hid = gen.forward(g, mem, input, None)?;
                    probs.push(gen.token_distribution(g, hid)?);
                }
                let targets: Vec<Vec<u32>> = reports.iter().map(|r| r.1.clone()).collect();
                generator_loss(g, &probs, &targets)
            },
            STEP,
        )?;
        agg.merge(&report);
    }
    Ok(agg)
}

fn total_suite(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let templates = IndicatorTemplates::default_subset(2)?;
    let mut agg = GradCheckReport::default();
    for _ in 0..TOTAL_INSTANCES {
        let states: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
        let report = templates.report(&states);
        let vocab = train_bpe(std::slice::from_ref(&report), 30)?.vocab;
        let mut cfg = ModelConfig::tiny(2, 3, 4, vocab.len(), templates.vocab().len());
        cfg.layers = 1;
        cfg.feature_dim = 3;
        let model = IihtModel::new(cfg, templates.clone(), vocab, rng.random())?;
        let record = ReportRecord {
            id: "gradcheck".into(),
            visual: Visual::Features((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()),
            labels: states.iter().map(|&s| (0..3).map(|j| u8::from(j == s)).collect()).collect(),
            report,
        };
        let lambda = rng.random_range(0.1..0.9);
        let check = gradcheck_store(
            &model.params,
            |g, p| {
                let view = IihtModel {
                    params: p.clone(),
                    ..model.clone()
                };
                let losses = view.record_losses(g, &record, true, None)?;
                total_loss(g, losses.l_g, Some(losses.l_c), lambda)
            },
            STEP,
        )?;
        agg.merge(&check);
    }
    Ok(agg)
}

/// Runs every op check plus the classifier, generator and blended losses.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<SuiteEntry> = gradcheck::run_op_suite(rng.random(), OP_INSTANCES)?
        .into_iter()
        .map(|(name, report)| SuiteEntry {
            name: format!("op {name}"),
            instances: OP_INSTANCES,
            report,
        })
        .collect();
    out.push(SuiteEntry {
        name: "classifier loss".into(),
        instances: CLASSIFIER_INSTANCES,
        report: classifier_suite(&mut rng)?,
    });
    out.push(SuiteEntry {
        name: "generator loss".into(),
        instances: GENERATOR_INSTANCES,
        report: generator_suite(&mut rng)?,
    });
    out.push(SuiteEntry {
        name: "blended loss".into(),
        instances: TOTAL_INSTANCES,
        report: total_suite(&mut rng)?,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::TOLERANCE;

    #[test]
    fn composite_losses_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for report in [classifier_suite(&mut rng).unwrap(), generator_suite(&mut rng).unwrap(), total_suite(&mut rng).unwrap()] {
            assert!(report.passed(TOLERANCE), "max rel error {}", report.max_rel_error);
            assert!(report.entries > 0);
        }
    }
}
