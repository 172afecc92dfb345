//! Trains for a few epochs, saves a checkpoint, reloads it and confirms the
//! reloaded model decodes bit-identically. Then resumes training from it.
//!
//! Run with `cargo run --release --example checkpoint_roundtrip`.

use iiht::corpus::{generate, CorpusSpec};
use iiht::decoding::{generate as decode, GenerateOptions};
use iiht::expansion::IndicatorTemplates;
use iiht::model::{IihtModel, ModelConfig};
use iiht::tokenizer::train_bpe;
use iiht::training::{Checkpoint, TrainConfig, Trainer};

fn main() -> iiht::Result<()> {
    let templates = IndicatorTemplates::default_subset(4)?;
    let mut spec = CorpusSpec::new(4, 3, 9);
    spec.n_train = 16;
    spec.n_val = 4;
    let corpus = generate(&spec, &templates)?;
    let texts: Vec<String> = corpus.train.iter().map(|r| r.report.clone()).collect();
    let vocab = train_bpe(&texts, 128)?.vocab;
    let (h, w) = spec.image_size();
    let mut cfg = ModelConfig::for_images(4, 3, h, w, vocab.len(), templates.vocab().len());
    cfg.hidden = 32;
    let mut model = IihtModel::new(cfg, templates, vocab, 9)?;

    let config = TrainConfig { epochs: 6, seed: 9, ..TrainConfig::toy() };
    let mut trainer = Trainer::new(config.clone())?;
    for _ in 0..3 {
        let m = trainer.run_epoch(&mut model, &corpus.train, &corpus.val)?;
        println!("epoch {} train loss {:.4}", m.epoch, m.train_loss);
    }

    let path = std::env::temp_dir().join("iiht_example.ckpt");
    trainer.checkpoint(&model).save(&path)?;
    let ckpt = Checkpoint::load(&path)?;
    println!("saved {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    let opts = GenerateOptions { max_len: 40, ..GenerateOptions::default() };
    let before = decode(&model, &corpus.val[0].visual, &opts)?;
    let after = decode(&ckpt.model, &corpus.val[0].visual, &opts)?;
    let same = before.tokens == after.tokens
        && before.step_probs.iter().flatten().zip(after.step_probs.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("reloaded decode bit-identical: {same}");

    // Resuming continues the same seeded schedule.
    let mut resumed_model = ckpt.model.clone();
    let mut resumed = Trainer::resume(config, &ckpt)?;
    let a = resumed.run_epoch(&mut resumed_model, &corpus.train, &corpus.val)?;
    let b = trainer.run_epoch(&mut model, &corpus.train, &corpus.val)?;
    println!("epoch {} after resume {:.6} vs uninterrupted {:.6}", a.epoch, a.train_loss, b.train_loss);
    Ok(())
}
