//! Compares greedy and beam decoding on an untrained generator with a sharp
//! output head, and checks a full-width beam against exhaustive search.
//!
//! Run with `cargo run --release --example beam_search -- [seed]`.

use iiht::decoding::{beam, greedy};
use iiht::generator::{self, IncrementalDecoder};
use iiht::model::ModelConfig;
use iiht::params::ParamStore;
use iiht::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> iiht::Result<()> {
    let mut cfg = ModelConfig::tiny(2, 3, 8, 9, 4);
    cfg.feature_dim = 8;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(6));
    generator::init_params(&cfg, &mut store, &mut rng);
    let head = store.get(generator::HEAD)?.map(|w| 3.0 * w);
    store.set(generator::HEAD, head)?;
    let memory = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let dec = IncrementalDecoder::new(&cfg, &store)?;

    let g = greedy(&dec, &memory, 6)?;
    println!("greedy        {:?} log-prob {:.4}", g.tokens, g.log_prob);
    for width in [1, 2, 4, 16] {
        let b = beam(&dec, &memory, 6, width, false)?;
        println!("beam width {width:2} {:?} log-prob {:.4}", b.tokens, b.log_prob);
    }
    let normed = beam(&dec, &memory, 6, 16, true)?;
    println!("length-normed {:?} log-prob {:.4}", normed.tokens, normed.log_prob);

    // every sequence of length ≤ 3 fits in a beam of width 9^3
    let full = beam(&dec, &memory, 3, 9usize.pow(3), false)?;
    println!("exhaustive (max_len 3) {:?} log-prob {:.4}", full.tokens, full.log_prob);
    Ok(())
}
