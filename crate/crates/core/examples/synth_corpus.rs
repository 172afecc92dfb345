//! Generates a small synthetic corpus, writes it as JSON lines and shows one
//! record.
//!
//! Run with `cargo run --example synth_corpus -- [out_dir]`.

use std::path::PathBuf;

use iiht::corpus::{generate, load_jsonl, save_jsonl, CorpusSpec, Visual};
use iiht::expansion::IndicatorTemplates;

fn main() -> iiht::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let templates = IndicatorTemplates::default();
    let mut spec = CorpusSpec::new(11, 3, 7);
    spec.n_train = 8;
    spec.n_val = 2;
    spec.n_test = 2;
    let corpus = generate(&spec, &templates)?;

    let path = out.join("synth_train.jsonl");
    save_jsonl(&corpus.train, &path)?;
    let back = load_jsonl(&path)?;
    assert_eq!(back, corpus.train);
    println!("{} records round-tripped through {}", back.len(), path.display());

    let r = &corpus.train[0];
    println!("id: {}", r.id);
    for (t, m) in r.states().into_iter().enumerate() {
        println!("  {:<30} {}", templates.indicator_name(t), templates.state_name(m));
    }
    if let Visual::Images(views) = &r.visual {
        let img = &views[0];
        println!("{} views of {}x{} pixels; first view:", views.len(), img.h, img.w);
        for row in img.pixels.chunks(img.w) {
            let line: String = row.iter().map(|&p| if p > 0.65 { '#' } else if p > 0.35 { '+' } else { '.' }).collect();
            println!("  {line}");
        }
    }
    println!("report: {}", r.report);
    Ok(())
}
