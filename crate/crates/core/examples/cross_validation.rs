//! Five-fold rotation over a corpus of precomputed feature vectors: trains a
//! small passthrough model per fold and scores the held-out fold.
//!
//! Run with `cargo run --release --example cross_validation`.

use iiht::corpus::{generate, CorpusSpec, ReportRecord, Visual};
use iiht::decoding::{evaluate, GenerateOptions};
use iiht::expansion::IndicatorTemplates;
use iiht::model::{IihtModel, ModelConfig};
use iiht::tokenizer::train_bpe;
use iiht::training::{kfold, train, TrainConfig};

/// Replaces images by their per-indicator cell means, as if a frozen
/// extractor had produced them.
fn to_features(r: &ReportRecord, spec: &CorpusSpec) -> ReportRecord {
    let Visual::Images(views) = &r.visual else { return r.clone() };
    let img = &views[0];
    let (_, cols) = spec.grid();
    let c = spec.cell_size;
    let feats = (0..spec.indicators)
        .map(|t| {
            let (gy, gx) = (t / cols, t % cols);
            let mut s = 0.0;
            for y in gy * c..(gy + 1) * c {
                for x in gx * c..(gx + 1) * c {
                    s += img.pixels[y * img.w + x];
                }
            }
            s / (c * c) as f64
        })
        .collect();
    ReportRecord { visual: Visual::Features(feats), ..r.clone() }
}

fn main() -> iiht::Result<()> {
    let templates = IndicatorTemplates::default_subset(3)?;
    let mut spec = CorpusSpec::new(3, 3, 13);
    spec.n_train = 40;
    spec.n_val = 0;
    spec.n_test = 0;
    let corpus = generate(&spec, &templates)?;
    let records: Vec<ReportRecord> = corpus.train.iter().map(|r| to_features(r, &spec)).collect();

    for (fold, (train_idx, val_idx)) in kfold(records.len(), 5, 13)?.into_iter().enumerate() {
        let tr: Vec<ReportRecord> = train_idx.iter().map(|&i| records[i].clone()).collect();
        let va: Vec<ReportRecord> = val_idx.iter().map(|&i| records[i].clone()).collect();
        let texts: Vec<String> = tr.iter().map(|r| r.report.clone()).collect();
        let vocab = train_bpe(&texts, 96)?.vocab;
        let mut cfg = ModelConfig::tiny(3, 3, 16, vocab.len(), templates.vocab().len());
        cfg.feature_dim = 3;
        let mut model = IihtModel::new(cfg, templates.clone(), vocab, fold as u64)?;
        let config = TrainConfig { epochs: 40, seed: fold as u64, ..TrainConfig::toy() };
        train(&mut model, &tr, &va, &config)?;
        let report = evaluate(&model, &va, &GenerateOptions { max_len: 60, ..GenerateOptions::default() })?;
        println!(
            "fold {fold}: BLEU-4 {:.3} ROUGE-L {:.3} METEOR-exact {:.3} state accuracy {:.3}",
            report.bleu4, report.rouge_l, report.meteor, report.mean_state_accuracy
        );
    }
    Ok(())
}
