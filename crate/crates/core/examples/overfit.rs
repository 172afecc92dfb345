//! Memorises a 32-record synthetic corpus, decodes it back, then flips
//! every indicator of every record to each other state and checks the report.
//!
//! Run with `cargo run --release --example overfit`.

use std::time::Instant;

use iiht::classifier::StateOverride;
use iiht::corpus::{generate, CorpusSpec};
use iiht::decoding::{generate as decode, GenerateOptions};
use iiht::expansion::IndicatorTemplates;
use iiht::model::{IihtModel, ModelConfig};
use iiht::tokenizer::train_bpe;
use iiht::training::{teacher_forced_accuracy, TrainConfig, Trainer};

fn main() -> iiht::Result<()> {
    env_logger::init();
    let templates = IndicatorTemplates::default();
    let mut spec = CorpusSpec::new(11, 3, 7);
    spec.n_train = 32;
    spec.n_val = 8;
    spec.n_test = 8;
    let corpus = generate(&spec, &templates)?;
    let texts: Vec<String> = corpus.train.iter().map(|r| r.report.clone()).collect();
    let vocab = train_bpe(&texts, 512)?.vocab;
    let (h, w) = spec.image_size();
    let cfg = ModelConfig::for_images(11, 3, h, w, vocab.len(), templates.vocab().len());
    let mut model = IihtModel::new(cfg, templates, vocab, 7)?;
    println!("vocab {} params {}", model.vocab.len(), model.params.num_scalars());

    let config = TrainConfig { seed: 7, ..TrainConfig::toy() };
    let mut trainer = Trainer::new(config.clone())?;
    let start = Instant::now();
    for _ in 0..config.epochs {
        let m = trainer.run_epoch(&mut model, &corpus.train, &corpus.val)?;
        if m.epoch % 20 == 0 || m.epoch == 1 {
            println!(
                "epoch {:3} loss {:.4} L_G/token {:.4} token_acc {:.4} val_state_acc {:.3} [{:.0}s]",
                m.epoch,
                m.train_loss,
                m.token_nll,
                m.token_acc,
                m.state_acc,
                start.elapsed().as_secs_f64()
            );
        }
    }
    let (acc, nll) = teacher_forced_accuracy(&model, &corpus.train)?;
    println!("teacher-forced accuracy {acc:.4}, {nll:.5} nats/token");

    let mut exact = 0;
    for r in &corpus.train {
        if decode(&model, &r.visual, &GenerateOptions::default())?.text == r.report {
            exact += 1;
        }
    }
    println!("exact greedy reports: {exact}/{}", corpus.train.len());

    let (mut hits, mut probes) = (0, 0);
    for r in &corpus.train {
        for (t, &orig) in r.states().iter().enumerate() {
            for m in (0..model.config.states).filter(|&m| m != orig) {
                let opts = GenerateOptions {
                    overrides: vec![StateOverride::one_hot(t, m, model.config.states)],
                    ..GenerateOptions::default()
                };
                let text = decode(&model, &r.visual, &opts)?.text;
                probes += 1;
                if text.contains(model.templates.sentence(t, m)) && !text.contains(model.templates.sentence(t, orig)) {
                    hits += 1;
                }
            }
        }
    }
    println!("override probes honoured: {hits}/{probes}");
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
