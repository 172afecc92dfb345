//! Trains only the classifier (λ = 0) on noiseless synthetic images and
//! reports per-indicator state accuracy on the held-out split.
//!
//! Run with `cargo run --release --example classify`.

use iiht::corpus::{generate, CorpusSpec};
use iiht::decoding::predict_states;
use iiht::expansion::IndicatorTemplates;
use iiht::metrics::state_accuracy;
use iiht::model::{IihtModel, ModelConfig};
use iiht::tokenizer::train_bpe;
use iiht::training::{train, TrainConfig};

fn main() -> iiht::Result<()> {
    let templates = IndicatorTemplates::default();
    let mut spec = CorpusSpec::new(11, 3, 21);
    spec.noise_std = 0.0;
    spec.n_train = 128;
    spec.n_val = 16;
    spec.n_test = 64;
    let corpus = generate(&spec, &templates)?;
    let texts: Vec<String> = corpus.train.iter().map(|r| r.report.clone()).collect();
    let vocab = train_bpe(&texts, 300)?.vocab;
    let (h, w) = spec.image_size();
    let cfg = ModelConfig::for_images(11, 3, h, w, vocab.len(), templates.vocab().len());
    let mut model = IihtModel::new(cfg, templates, vocab, 21)?;

    let config = TrainConfig {
        lambda: 0.0,
        epochs: 30,
        batch_size: 8,
        seed: 21,
        ..TrainConfig::toy()
    };
    let (log, _) = train(&mut model, &corpus.train, &corpus.val, &config)?;
    for m in log.iter().filter(|m| m.epoch % 5 == 0) {
        println!("epoch {:2} L_C {:.4} val state accuracy {:.3}", m.epoch, m.l_c, m.state_acc);
    }

    let mut predicted = Vec::new();
    for r in &corpus.test {
        predicted.push(predict_states(&model, &r.visual)?.1);
    }
    let labels: Vec<Vec<usize>> = corpus.test.iter().map(|r| r.states()).collect();
    let acc = state_accuracy(&predicted, &labels, 3)?;
    for (t, a) in acc.accuracy.iter().enumerate() {
        println!("{:<30} {:.3}", model.templates.indicator_name(t), a);
    }
    let mean = acc.accuracy.iter().sum::<f64>() / acc.accuracy.len() as f64;
    println!("held-out mean state accuracy {mean:.4}");
    Ok(())
}
