//! Learns byte-pair merges on synthetic reports and round-trips a sentence.
//!
//! Run with `cargo run --example subword_tokenizer`.

use iiht::corpus::{generate, CorpusSpec};
use iiht::expansion::IndicatorTemplates;
use iiht::tokenizer::{train_bpe, SubwordVocab};

fn main() -> iiht::Result<()> {
    let templates = IndicatorTemplates::default();
    let mut spec = CorpusSpec::new(11, 3, 3);
    spec.n_train = 64;
    let corpus = generate(&spec, &templates)?;
    let texts: Vec<String> = corpus.train.iter().map(|r| r.report.clone()).collect();

    for target in [64, 128, 256] {
        let bpe = train_bpe(&texts, target)?;
        let ids: usize = texts.iter().map(|t| bpe.vocab.encode(t).len()).sum();
        println!(
            "target {target:3}: {} tokens, {} merges, {:.1} ids per report",
            bpe.vocab.len(),
            bpe.vocab.merges().len(),
            ids as f64 / texts.len() as f64
        );
    }

    let vocab = train_bpe(&texts, 256)?.vocab;
    let sentence = "no pneumothorax. the lungs are clear and the heart size is normal. zebra";
    let ids = vocab.encode(sentence);
    let pieces: Vec<String> = ids.iter().map(|&i| vocab.token_str(i)).collect();
    println!("{sentence}\n  -> {pieces:?}\n  -> {}", vocab.decode(&ids));

    let reloaded = SubwordVocab::from_lines(&vocab.vocab_lines(), &vocab.merge_lines())?;
    assert_eq!(reloaded.encode(sentence), ids);
    Ok(())
}
