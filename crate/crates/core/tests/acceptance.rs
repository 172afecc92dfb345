//! Acceptance criteria, one test per criterion. Each test writes a single
//! `criterion N ... PASS|FAIL` line straight to stderr, so the lines survive
//! output capture.

use std::collections::HashMap;
use std::io::Write;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use iiht::classifier::{self, Classifier, Phase, StateOverride};
use iiht::corpus::{generate, save_jsonl, Corpus, CorpusSpec, ReportRecord, Visual};
use iiht::decoding::{beam, generate as decode, predict_states, GenerateOptions};
use iiht::expansion::IndicatorTemplates;
use iiht::generator::{self, Generator, IncrementalDecoder};
use iiht::metrics::{self, bleu_n, meteor_exact, rouge_l, tokenize};
use iiht::model::{IihtModel, ModelConfig};
use iiht::params::ParamStore;
use iiht::tensor::gradcheck::TOLERANCE;
use iiht::tensor::{Graph, Tensor};
use iiht::tokenizer::{train_bpe, BOS, EOS, PAD};
use iiht::training::{Checkpoint, EpochMetrics, TrainConfig, Trainer};
use iiht::verify::gradient_suite;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n:2} {name:<34} {}  {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

// ----- shared fixtures -------------------------------------------------------

fn tiny_model(t: usize, e: usize, layers: usize, seed: u64) -> (IihtModel, Vec<ReportRecord>) {
    let templates = IndicatorTemplates::default_subset(t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records: Vec<ReportRecord> = (0..4)
        .map(|i| {
            let states: Vec<usize> = (0..t).map(|_| rng.random_range(0..3)).collect();
            ReportRecord {
                id: format!("r{i}"),
                visual: Visual::Features((0..6).map(|_| rng.random_range(-1.0..1.0)).collect()),
                labels: states.iter().map(|&s| (0..3).map(|j| u8::from(j == s)).collect()).collect(),
                report: templates.report(&states),
            }
        })
        .collect();
    let texts: Vec<String> = records.iter().map(|r| r.report.clone()).collect();
    let vocab = train_bpe(&texts, 80).unwrap().vocab;
    let mut cfg = ModelConfig::tiny(t, 3, e, vocab.len(), templates.vocab().len());
    cfg.layers = layers;
    cfg.feature_dim = 6;
    (IihtModel::new(cfg, templates, vocab, seed).unwrap(), records)
}

struct Overfit {
    corpus: Corpus,
    model: IihtModel,
    elapsed: Duration,
    epochs: usize,
}

/// The 32-record memorisation run shared by criteria 5 and 6.
fn overfit() -> &'static Overfit {
    static CELL: OnceLock<Overfit> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let templates = IndicatorTemplates::default();
        let mut spec = CorpusSpec::new(11, 3, 7);
        spec.n_train = 32;
        spec.n_val = 8;
        spec.n_test = 8;
        let corpus = generate(&spec, &templates).unwrap();
        let texts: Vec<String> = corpus.train.iter().map(|r| r.report.clone()).collect();
        let vocab = train_bpe(&texts, 512).unwrap().vocab;
        let (h, w) = spec.image_size();
        let cfg = ModelConfig::for_images(11, 3, h, w, vocab.len(), templates.vocab().len());
        assert_eq!((cfg.hidden, cfg.layers, cfg.heads), (64, 2, 4));
        let mut model = IihtModel::new(cfg, templates, vocab, 7).unwrap();
        let config = TrainConfig { seed: 7, ..TrainConfig::toy() };
        assert_eq!(config.learning_rate, 1e-3);
        assert!(config.epochs <= 200);
        let mut trainer = Trainer::new(config.clone()).unwrap();
        for _ in 0..config.epochs {
            trainer.run_epoch(&mut model, &corpus.train, &corpus.val).unwrap();
        }
        Overfit {
            corpus,
            model,
            elapsed: start.elapsed(),
            epochs: config.epochs,
        }
    })
}

// ----- 1 ---------------------------------------------------------------------

#[test]
fn c01_gradient_correctness() {
    let start = Instant::now();
    let entries = gradient_suite(2024).unwrap();
    let elapsed = start.elapsed();
    let failed: Vec<&str> = entries.iter().filter(|e| !e.report.passed(TOLERANCE)).map(|e| e.name.as_str()).collect();
    let worst = entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    let instances: usize = entries.iter().map(|e| e.instances).sum();
    let min_per_check = entries.iter().map(|e| e.instances).min().unwrap();
    let names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    let composites = ["classifier loss", "generator loss", "blended loss"].iter().all(|n| names.contains(n));
    let pass = failed.is_empty() && instances >= 100 && composites && elapsed < Duration::from_secs(60);
    report(
        1,
        "gradient correctness",
        pass,
        &format!(
            "{} checks, {instances} instances (min {min_per_check}), worst rel err {worst:.2e} < 1e-4, {:.1}s < 60s, failed {failed:?}",
            entries.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ----- 2 ---------------------------------------------------------------------

#[test]
fn c02_probability_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut forwards = 0;
    for k in 0..50 {
        let (model, _) = tiny_model(rng.random_range(1..5), 8, rng.random_range(1..3), 100 + k);
        let v = model.config.vocab_size as u32;
        for _ in 0..20 {
            let g = Graph::new();
            let visual = Visual::Features((0..6).map(|_| rng.random_range(-3.0..3.0)).collect());
            let fwd = model.encode(&g, &visual, None, &[], false).unwrap();
            let alpha = g.value(fwd.alpha);
            for t in 0..alpha.shape()[0] {
                worst = worst.max((alpha.row(t).iter().sum::<f64>() - 1.0).abs());
            }
            let n = rng.random_range(1..8);
            let mut tokens = vec![BOS];
            tokens.extend((1..n).map(|_| rng.random_range(3..v)));
            let gen = model.generator();
            let p = g.value(gen.token_distribution(&g, gen.forward(&g, fwd.memory, &tokens, None).unwrap()).unwrap());
            for i in 0..p.shape()[0] {
                worst = worst.max((p.row(i).iter().sum::<f64>() - 1.0).abs());
            }
            forwards += 1;
        }
    }
    let pass = forwards >= 1000 && worst < 1e-9;
    report(2, "alpha and p_n sum to one", pass, &format!("{forwards} forwards, max |sum - 1| = {worst:.1e} < 1e-9"));
    assert!(pass);
}

// ----- 3 ---------------------------------------------------------------------

#[test]
fn c03_causality() {
    let mut violations = 0;
    let mut checked = 0;
    for layers in [1, 2, 4] {
        let (model, _) = tiny_model(3, 8, layers, 30 + layers as u64);
        let mut cfg = model.config.clone();
        cfg.dropout = 0.0;
        let gen = Generator::new(&cfg, &model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(layers as u64);
        let memory = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let v = cfg.vocab_size as u32;
        let tokens: Vec<u32> = std::iter::once(BOS).chain((0..7).map(|_| rng.random_range(3..v))).collect();
        let hidden = |toks: &[u32]| {
            let g = Graph::new();
            g.value(gen.forward(&g, g.constant(memory.clone()), toks, None).unwrap())
        };
        let base = hidden(&tokens);
        for j in 1..tokens.len() {
            let mut changed = tokens.clone();
            changed[j] = 3 + (tokens[j] - 3 + 1) % (v - 3);
            let other = hidden(&changed);
            for i in 0..j {
                checked += 1;
                if base.row(i).iter().zip(other.row(i)).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    violations += 1;
                }
            }
        }
    }
    let pass = violations == 0;
    report(3, "causality Z in {1,2,4}", pass, &format!("{checked} earlier rows compared bitwise, {violations} changed"));
    assert!(pass);
}

// ----- 4 ---------------------------------------------------------------------

#[test]
fn c04_state_substitution_contract() {
    let (model, _) = tiny_model(4, 8, 1, 4);
    let clf = Classifier::new(&model.config, &model.params);
    let s = model.params.get(classifier::STATES).unwrap().clone();
    let (e, m) = (s.shape()[0], s.shape()[1]);
    let mut ok_column = true;
    let mut ok_paths = true;
    for states in [[0, 1, 2, 0], [2, 2, 1, 0], [1, 0, 0, 2]] {
        let labels: Vec<Vec<u8>> = states.iter().map(|&k| (0..m).map(|j| u8::from(j == k)).collect()).collect();
        let g = Graph::new();
        let dummy = g.constant(Tensor::full(&[4, m], 1.0 / m as f64));
        let train = g.value(clf.state_substitute(&g, dummy, Some(&labels), Phase::Train, &[]).unwrap());
        for (t, &k) in states.iter().enumerate() {
            for d in 0..e {
                ok_column &= train.at(t, d).to_bits() == s.at(d, k).to_bits();
            }
        }
        let one_hot = Tensor::new(vec![4, m], labels.iter().flatten().map(|&c| c as f64).collect()).unwrap();
        let infer = g.value(clf.state_substitute(&g, g.constant(one_hot), None, Phase::Infer, &[]).unwrap());
        ok_paths &= train.data().iter().zip(infer.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let pass = ok_column && ok_paths;
    report(
        4,
        "state substitution contract",
        pass,
        &format!("training path = column of S: {ok_column}; inference with one-hot alpha bit-identical: {ok_paths}"),
    );
    assert!(pass);
}

// ----- 5 ---------------------------------------------------------------------

#[test]
fn c05_overfit_reproduction() {
    let o = overfit();
    let (acc, nll) = iiht::training::teacher_forced_accuracy(&o.model, &o.corpus.train).unwrap();
    let exact = o
        .corpus
        .train
        .iter()
        .filter(|r| decode(&o.model, &r.visual, &GenerateOptions::default()).unwrap().text == r.report)
        .count();
    let pass = acc >= 0.99 && exact >= 30 && o.elapsed < Duration::from_secs(600) && o.corpus.train.len() == 32;
    assert!(nll < 0.05, "final L_G {nll} nats/token");
    report(
        5,
        "overfit reproduction",
        pass,
        &format!(
            "token acc {acc:.4} >= 0.99, exact {exact}/32 >= 30, L_G {nll:.5} nats/token, {} epochs in {:.0}s < 600s",
            o.epochs,
            o.elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ----- 6 ---------------------------------------------------------------------

#[test]
fn c06_indicator_override() {
    let o = overfit();
    let model = &o.model;
    let (mut hits, mut probes, mut local) = (0, 0, 0);
    for r in &o.corpus.train {
        for (t, &orig) in r.states().iter().enumerate() {
            for s in (0..model.config.states).filter(|&s| s != orig) {
                let opts = GenerateOptions {
                    overrides: vec![StateOverride::one_hot(t, s, model.config.states)],
                    ..GenerateOptions::default()
                };
                let text = decode(model, &r.visual, &opts).unwrap().text;
                probes += 1;
                if text.contains(model.templates.sentence(t, s)) && !text.contains(model.templates.sentence(t, orig)) {
                    hits += 1;
                }
                let states = r.states();
                if (0..states.len()).filter(|&u| u != t).all(|u| text.contains(model.templates.sentence(u, states[u]))) {
                    local += 1;
                }
            }
        }
    }
    let rate = hits as f64 / probes as f64;

    // The same through the command line.
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("overfit.ckpt");
    let trainer = Trainer::new(TrainConfig::toy()).unwrap();
    trainer.checkpoint(model).save(&ckpt).unwrap();
    let pneumonia = model.templates.find_indicator("pneumonia").unwrap();
    let positive = model.templates.find_state("positive").unwrap();
    let record = o.corpus.train.iter().find(|r| r.states()[pneumonia] != positive).unwrap();
    let data = dir.path().join("records.jsonl");
    save_jsonl(std::slice::from_ref(record), &data).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_iiht"))
        .args(["generate", "--set", "pneumonia=positive", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let cli_ok = out.status.success() && stdout.contains(model.templates.sentence(pneumonia, positive));

    let pass = rate >= 0.95 && cli_ok;
    report(
        6,
        "indicator override",
        pass,
        &format!(
            "{hits}/{probes} probes honoured = {:.1}% >= 95%; other sentences intact in {local}/{probes}; CLI --set pneumonia=positive: {cli_ok}",
            100.0 * rate
        ),
    );
    assert!(pass);
}

// ----- 7 ---------------------------------------------------------------------

#[test]
fn c07_classifier_learnability() {
    let templates = IndicatorTemplates::default();
    let mut spec = CorpusSpec::new(11, 3, 21);
    spec.noise_std = 0.0;
    spec.n_train = 128;
    spec.n_val = 16;
    spec.n_test = 64;
    let corpus = generate(&spec, &templates).unwrap();
    let texts: Vec<String> = corpus.train.iter().map(|r| r.report.clone()).collect();
    let vocab = train_bpe(&texts, 300).unwrap().vocab;
    let (h, w) = spec.image_size();
    let cfg = ModelConfig::for_images(11, 3, h, w, vocab.len(), templates.vocab().len());
    let mut model = IihtModel::new(cfg, templates, vocab, 21).unwrap();
    let config = TrainConfig {
        lambda: 0.0,
        epochs: 30,
        batch_size: 8,
        seed: 21,
        ..TrainConfig::toy()
    };
    iiht::training::train(&mut model, &corpus.train, &corpus.val, &config).unwrap();
    let predicted: Vec<Vec<usize>> = corpus.test.iter().map(|r| predict_states(&model, &r.visual).unwrap().1).collect();
    let labels: Vec<Vec<usize>> = corpus.test.iter().map(ReportRecord::states).collect();
    let acc = metrics::state_accuracy(&predicted, &labels, 3).unwrap();
    let worst = acc.accuracy.iter().copied().fold(1.0, f64::min);
    let pass = worst >= 0.99;
    report(
        7,
        "classifier learnability",
        pass,
        &format!("held-out ({} records) worst per-indicator accuracy {worst:.3} >= 0.99", corpus.test.len()),
    );
    assert!(pass);
}

// ----- 8 ---------------------------------------------------------------------

fn random_text(rng: &mut ChaCha8Rng, max: usize) -> String {
    let words = ["the", "lungs", "are", "clear", "no", "effusion"];
    let n = rng.random_range(1..=max);
    (0..n).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
}

/// Corpus BLEU from scratch: sorted n-gram lists, clipped by two-pointer merge.
fn bleu_oracle(cands: &[String], refs: &[String], n: usize) -> f64 {
    let grams = |toks: &[String], k: usize| -> Vec<String> {
        let mut v: Vec<String> = if toks.len() >= k { (0..=toks.len() - k).map(|i| toks[i..i + k].join("\u{1}")).collect() } else { Vec::new() };
        v.sort();
        v
    };
    let mut log_p = 0.0;
    for k in 1..=n {
        let (mut m, mut total) = (0usize, 0usize);
        for (c, r) in cands.iter().zip(refs) {
            let (cg, rg) = (grams(&tokenize(c), k), grams(&tokenize(r), k));
            total += cg.len();
            let (mut i, mut j) = (0, 0);
            while i < cg.len() && j < rg.len() {
                match cg[i].cmp(&rg[j]) {
                    std::cmp::Ordering::Equal => {
                        m += 1;
                        i += 1;
                        j += 1;
                    }
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                }
            }
        }
        let p = if m == 0 { 1e-9 / total.max(1) as f64 } else { m as f64 / total as f64 };
        log_p += p.ln();
    }
    let c: usize = cands.iter().map(|s| tokenize(s).len()).sum();
    let r: usize = refs.iter().map(|s| tokenize(s).len()).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_p / n as f64).exp()
}

/// Longest common subsequence by trying every subsequence of `a`.
fn lcs_exhaustive(a: &[String], b: &[String]) -> usize {
    (0u32..1 << a.len())
        .filter(|mask| {
            let mut it = b.iter();
            (0..a.len()).filter(|i| mask >> i & 1 == 1).all(|i| it.any(|x| *x == a[i]))
        })
        .map(|mask| mask.count_ones() as usize)
        .max()
        .unwrap_or(0)
}

/// All partial injective matchings of equal tokens: best (matches, -chunks).
fn meteor_exhaustive(c: &[String], r: &[String]) -> f64 {
    let mut best: Option<(usize, usize)> = None;
    let mut stack: Vec<(usize, Vec<Option<usize>>)> = vec![(0, Vec::new())];
    while let Some((i, assign)) = stack.pop() {
        if i == c.len() {
            let pairs: Vec<(usize, usize)> = assign.iter().enumerate().filter_map(|(ci, rj)| rj.map(|rj| (ci, rj))).collect();
            let chunks = pairs.iter().enumerate().filter(|(k, p)| *k == 0 || pairs[k - 1] != (p.0 - 1, p.1.wrapping_sub(1))).count();
            let cand = (pairs.len(), chunks);
            if best.is_none_or(|b| cand.0 > b.0 || (cand.0 == b.0 && cand.1 < b.1)) {
                best = Some(cand);
            }
            continue;
        }
        let mut skip = assign.clone();
        skip.push(None);
        stack.push((i + 1, skip));
        for j in 0..r.len() {
            if r[j] == c[i] && !assign.contains(&Some(j)) {
                let mut take = assign.clone();
                take.push(Some(j));
                stack.push((i + 1, take));
            }
        }
    }
    let (m, chunks) = best.unwrap();
    if m == 0 {
        return 0.0;
    }
    let (p, rc) = (m as f64 / c.len() as f64, m as f64 / r.len() as f64);
    10.0 * p * rc / (rc + 9.0 * p) * (1.0 - 0.5 * (chunks as f64 / m as f64).powi(3))
}

#[test]
fn c08_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bleu_err: f64 = 0.0;
    let mut rouge_err: f64 = 0.0;
    for _ in 0..20 {
        let c = vec![random_text(&mut rng, 10)];
        let r = vec![random_text(&mut rng, 10)];
        for n in 1..=4 {
            bleu_err = bleu_err.max((bleu_n(&c, &r, n).unwrap() - bleu_oracle(&c, &r, n)).abs());
        }
        let (ct, rt) = (tokenize(&c[0]), tokenize(&r[0]));
        let l = lcs_exhaustive(&ct, &rt) as f64;
        let want = if l == 0.0 {
            0.0
        } else {
            let (rec, prec) = (l / rt.len() as f64, l / ct.len() as f64);
            (1.0 + 1.44) * rec * prec / (rec + 1.44 * prec)
        };
        rouge_err = rouge_err.max((rouge_l(&c, &r).unwrap() - want).abs());
    }
    let mut meteor_err: f64 = 0.0;
    for _ in 0..200 {
        let c = random_text(&mut rng, 6);
        let r = random_text(&mut rng, 6);
        let want = meteor_exhaustive(&tokenize(&c), &tokenize(&r));
        meteor_err = meteor_err.max((meteor_exact(&[c], &[r]).unwrap() - want).abs());
    }
    let same: Vec<String> = (0..5).map(|_| random_text(&mut rng, 12) + " is clear today").collect();
    let identical = (1..=4).all(|n| bleu_n(&same, &same, n).unwrap() == 1.0) && rouge_l(&same, &same).unwrap() == 1.0;
    let pass = bleu_err < 1e-9 && rouge_err < 1e-9 && meteor_err < 1e-12 && identical;
    report(
        8,
        "metric oracles",
        pass,
        &format!("BLEU err {bleu_err:.1e}, ROUGE-L err {rouge_err:.1e} (< 1e-9, 20 pairs); METEOR err {meteor_err:.1e} (200 pairs <= 6 tokens); identical = 1.0: {identical}"),
    );
    assert!(pass);
}

// ----- 9 ---------------------------------------------------------------------

fn small_image_setup(seed: u64) -> (IihtModel, Corpus) {
    let templates = IndicatorTemplates::default_subset(4).unwrap();
    let mut spec = CorpusSpec::new(4, 3, seed);
    spec.n_train = 20;
    spec.n_val = 4;
    spec.n_test = 4;
    let corpus = generate(&spec, &templates).unwrap();
    let texts: Vec<String> = corpus.train.iter().map(|r| r.report.clone()).collect();
    let vocab = train_bpe(&texts, 100).unwrap().vocab;
    let (h, w) = spec.image_size();
    let mut cfg = ModelConfig::for_images(4, 3, h, w, vocab.len(), templates.vocab().len());
    cfg.hidden = 16;
    let model = IihtModel::new(cfg, templates, vocab, seed).unwrap();
    (model, corpus)
}

#[test]
fn c09_lambda_gating() {
    let mut results = Vec::new();
    for lambda in [0.0, 1.0] {
        let (mut model, corpus) = small_image_setup(9);
        let before = model.params.clone();
        let config = TrainConfig { lambda, batch_size: 2, epochs: 1, seed: 9, ..TrainConfig::toy() };
        let mut trainer = Trainer::new(config).unwrap();
        trainer.run_epoch(&mut model, &corpus.train, &corpus.val).unwrap();
        assert_eq!(trainer.step, 10);
        let untouched = |prefix: &str| model.params.bit_eq_prefix(&before, prefix);
        // The visual encoder also feeds the generator's visual memory row and S
        // is shared, so only the per-indicator projections are classifier-only.
        let ok = if lambda == 0.0 {
            untouched("generator.") && untouched("expansion.") && !untouched("classifier.")
        } else {
            untouched("classifier.proj.") && !untouched("generator.")
        };
        results.push(ok);
    }
    let pass = results.iter().all(|&x| x);
    report(
        9,
        "lambda gating",
        pass,
        &format!("10 steps: lambda=0 leaves generator+expansion bit-unchanged: {}; lambda=1 leaves classifier projections bit-unchanged: {}", results[0], results[1]),
    );
    assert!(pass);
}

// ----- 10 --------------------------------------------------------------------

fn run_log(seed: u64) -> (Vec<EpochMetrics>, IihtModel, Trainer) {
    let (mut model, corpus) = small_image_setup(10);
    let config = TrainConfig { epochs: 3, seed, ..TrainConfig::toy() };
    let mut trainer = Trainer::new(config).unwrap();
    let log = (0..3).map(|_| trainer.run_epoch(&mut model, &corpus.train, &corpus.val).unwrap()).collect();
    (log, model, trainer)
}

#[test]
fn c10_determinism_and_persistence() {
    let (log_a, model, trainer) = run_log(5);
    let (log_b, _, _) = run_log(5);
    let rows = |l: &[EpochMetrics]| l.iter().map(EpochMetrics::csv_row).collect::<Vec<_>>();
    let same_logs = rows(&log_a) == rows(&log_b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    trainer.checkpoint(&model).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().model;
    let (_, corpus) = small_image_setup(10);
    let mut bit_equal = true;
    for r in corpus.val.iter().chain(&corpus.test) {
        let probs = |m: &IihtModel| {
            let g = Graph::new();
            let fwd = m.encode(&g, &r.visual, None, &[], false).unwrap();
            let (input, _) = m.teacher_forcing(&r.report);
            let gen = m.generator();
            let p = gen.token_distribution(&g, gen.forward(&g, fwd.memory, &input, None).unwrap()).unwrap();
            let mut out: Vec<u64> = g.value(fwd.alpha).data().iter().map(|x| x.to_bits()).collect();
            out.extend(g.value(p).data().iter().map(|x| x.to_bits()));
            out
        };
        bit_equal &= probs(&model) == probs(&loaded);
    }
    let pass = same_logs && bit_equal;
    report(
        10,
        "determinism and persistence",
        pass,
        &format!("same-seed logs identical: {same_logs}; reloaded forward bit-identical: {bit_equal}"),
    );
    assert!(pass);
}

// ----- 11 --------------------------------------------------------------------

#[test]
fn c11_beam_exhaustive_optimality() {
    let mut agree = 0;
    let mut cases = 0;
    for (v, max_len) in [(5, 4), (5, 3), (4, 4), (5, 2), (4, 3)] {
        for seed in 0..4 {
            let mut cfg = ModelConfig::tiny(2, 3, 8, v, 4);
            cfg.feature_dim = 8;
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            generator::init_params(&cfg, &mut store, &mut rng);
            let head = store.get(generator::HEAD).unwrap().map(|w| 4.0 * w);
            store.set(generator::HEAD, head).unwrap();
            let memory = Tensor::randn(&[3, 8], 1.0, &mut rng);
            let dec = IncrementalDecoder::new(&cfg, &store).unwrap();
            let hyp = beam(&dec, &memory, max_len, v.pow(max_len as u32), false).unwrap();

            // Brute force scored with full graph forwards.
            let gen = Generator::new(&cfg, &store);
            let emit: Vec<u32> = (0..v as u32).filter(|&t| t != PAD && t != BOS).collect();
            let mut scores: HashMap<Vec<u32>, f64> = HashMap::new();
            let mut frontier = vec![Vec::<u32>::new()];
            for len in 1..=max_len {
                let mut next = Vec::new();
                for prefix in &frontier {
                    for &t in &emit {
                        let mut s = prefix.clone();
                        s.push(t);
                        if t == EOS || len == max_len {
                            let g = Graph::new();
                            let mut input = vec![BOS];
                            input.extend_from_slice(&s[..s.len() - 1]);
                            let hid = gen.forward(&g, g.constant(memory.clone()), &input, None).unwrap();
                            let p = g.value(gen.token_distribution(&g, hid).unwrap());
                            let lp = s.iter().enumerate().map(|(i, &tok)| p.at(i, tok as usize).ln()).sum();
                            scores.insert(s, lp);
                        } else {
                            next.push(s);
                        }
                    }
                }
                frontier = next;
            }
            let (best_seq, best_lp) = scores
                .iter()
                .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(s, lp)| (s.clone(), *lp))
                .unwrap();
            cases += 1;
            if hyp.tokens == best_seq && (hyp.log_prob - best_lp).abs() < 1e-9 {
                agree += 1;
            }
        }
    }
    let pass = agree == cases;
    report(11, "beam = exhaustive argmax (v<=5, len<=4)", pass, &format!("{agree}/{cases} micro models agree"));
    assert!(pass);
}
