//! Scores candidate reports against references with BLEU-1..4, ROUGE-L and
//! exact-match METEOR.
//!
//! Run with `cargo run --example text_metrics`.

use iiht::metrics::{align, bleu_n, meteor_exact, rouge_l, tokenize};

fn main() -> iiht::Result<()> {
    let references = vec![
        "the heart is normal in size. no pneumothorax. no pleural effusion.".to_string(),
        "mild cardiomegaly. there is a small left pleural effusion.".to_string(),
    ];
    let candidates = vec![
        "the heart is normal in size. no pleural effusion. no pneumothorax.".to_string(),
        "there is a small pleural effusion.".to_string(),
    ];
    for n in 1..=4 {
        println!("BLEU-{n}   {:.4}", bleu_n(&candidates, &references, n)?);
    }
    println!("ROUGE-L  {:.4}", rouge_l(&candidates, &references)?);
    println!("METEOR-exact {:.4}", meteor_exact(&candidates, &references)?);

    let a = align(&tokenize(&candidates[0]), &tokenize(&references[0]));
    println!("first pair: {} matched unigrams in {} chunks", a.matches, a.chunks);
    Ok(())
}
