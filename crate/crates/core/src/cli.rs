//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Deserialize;

use crate::classifier::{argmax, StateOverride};
use crate::corpus::{self, CorpusSpec, ReportRecord, Visual};
use crate::decoding::{self, DecodeMode, GenerateOptions};
use crate::error::Error;
use crate::expansion::IndicatorTemplates;
use crate::model::{EncoderConfig, IihtModel, ModelConfig};
use crate::tensor::gradcheck::TOLERANCE;
use crate::tokenizer::train_bpe;
use crate::training::{self, Checkpoint, TrainConfig, Trainer};
use crate::verify;

#[derive(Parser, Debug)]
#[command(name = "iiht", version, about = "Indicator-conditioned report generation")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus: train/val/test JSONL plus the templates file.
    SynthData(SynthArgs),
    /// Train a model and write a checkpoint plus a per-epoch CSV log.
    Train(Box<TrainArgs>),
    /// Generate the report for one record.
    Generate(GenerateArgs),
    /// Score generated reports and predicted states on a split.
    Evaluate(EvaluateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(SeedArg),
    /// Summarise a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct SeedArg {
    #[arg(long, env = "IIHT_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value_t = 11)]
    indicators: usize,
    #[arg(long, default_value_t = 256)]
    train: usize,
    #[arg(long, default_value_t = 32)]
    val: usize,
    #[arg(long, default_value_t = 64)]
    test: usize,
    #[arg(long, default_value_t = 2)]
    views: usize,
    #[arg(long, default_value_t = 4)]
    cell_size: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Toy,
    Paper,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory with train.jsonl, val.jsonl and optionally templates.txt.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Continue from a checkpoint instead of initialising a new model.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    preset: Preset,
    /// JSON file of hyperparameters applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    hp: Hyper,
}

/// Hyperparameters; each one overrides the preset and the config file.
#[derive(Args, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct Hyper {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    visual_dropout: Option<f64>,
    #[arg(long)]
    token_dropout: Option<f64>,
    /// Target size of the subword vocabulary.
    #[arg(long)]
    vocab_size: Option<usize>,
}

impl Hyper {
    fn overlay(&mut self, over: Hyper) {
        macro_rules! take {
            ($($f:ident),*) => { $( if over.$f.is_some() { self.$f = over.$f; } )* };
        }
        take!(lambda, lr, weight_decay, batch_size, epochs, clip_norm, hidden, heads, layers, feature_dim, dropout, visual_dropout, token_dropout, vocab_size);
    }
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// Beam width; greedy decoding when absent.
    #[arg(long)]
    beam: Option<usize>,
    /// Rank finished beams by mean instead of total log-probability.
    #[arg(long, requires = "beam")]
    length_norm: bool,
    /// Condition on one-hot argmax states instead of the soft mixture.
    #[arg(long)]
    hard_states: bool,
    #[arg(long, default_value_t = 160)]
    max_len: usize,
}

impl DecodeArgs {
    fn options(&self, overrides: Vec<StateOverride>) -> GenerateOptions {
        GenerateOptions {
            mode: match self.beam {
                Some(width) => DecodeMode::Beam {
                    width,
                    length_norm: self.length_norm,
                },
                None => DecodeMode::Greedy,
            },
            max_len: self.max_len,
            overrides,
            hard_states: self.hard_states,
        }
    }
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL file holding the record.
    #[arg(long)]
    data: PathBuf,
    /// Record id; the first record is used when neither id nor index is given.
    #[arg(long, conflicts_with = "index")]
    id: Option<String>,
    #[arg(long)]
    index: Option<usize>,
    /// Force an indicator state, e.g. `--set pneumonia=positive`. Repeatable.
    #[arg(long = "set", value_name = "INDICATOR=STATE")]
    set: Vec<String>,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Print a JSON object instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL split to score.
    #[arg(long)]
    data: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();

    let result = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(*a),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn synth_data(a: SynthArgs) -> CliResult<()> {
    let templates = IndicatorTemplates::default_subset(a.indicators).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut spec = CorpusSpec::new(a.indicators, templates.num_states(), a.seed.seed);
    spec.n_train = a.train;
    spec.n_val = a.val;
    spec.n_test = a.test;
    spec.views = a.views;
    spec.cell_size = a.cell_size;
    spec.noise_std = a.noise;
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let data = corpus::generate(&spec, &templates)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::file(&a.out, e))?;
    corpus::save_jsonl(&data.train, &a.out.join("train.jsonl"))?;
    corpus::save_jsonl(&data.val, &a.out.join("val.jsonl"))?;
    corpus::save_jsonl(&data.test, &a.out.join("test.jsonl"))?;
    templates.save(&a.out.join("templates.txt"))?;
    let spec_path = a.out.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&spec).map_err(Error::from)? + "\n").map_err(|e| Error::file(&spec_path, e))?;
    println!(
        "wrote {} train, {} val, {} test records to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        a.out.display()
    );
    Ok(())
}

fn preset_values(p: Preset) -> (TrainConfig, Hyper) {
    match p {
        Preset::Toy => (TrainConfig::toy(), Hyper::default()),
        Preset::Paper => (
            TrainConfig::paper(),
            Hyper {
                hidden: Some(512),
                ..Hyper::default()
            },
        ),
    }
}

fn load_templates(explicit: Option<&Path>, data: &Path, indicators: usize) -> CliResult<IndicatorTemplates> {
    if let Some(p) = explicit {
        return Ok(IndicatorTemplates::load(p)?);
    }
    let default = data.join("templates.txt");
    if default.exists() {
        Ok(IndicatorTemplates::load(&default)?)
    } else {
        Ok(IndicatorTemplates::default_subset(indicators)?)
    }
}

fn model_config(first: &ReportRecord, templates: &IndicatorTemplates, vocab_len: usize, hp: &Hyper) -> CliResult<ModelConfig> {
    let (t, m, wv) = (templates.num_indicators(), templates.num_states(), templates.vocab().len());
    let mut cfg = match &first.visual {
        Visual::Images(imgs) => {
            let img = imgs.first().ok_or_else(|| Error::contract(format!("record {} has no images", first.id)))?;
            ModelConfig::for_images(t, m, img.h, img.w, vocab_len, wv)
        }
        Visual::Features(f) => {
            let mut c = ModelConfig::for_images(t, m, 1, 1, vocab_len, wv);
            c.encoder = EncoderConfig::Passthrough;
            c.feature_dim = f.len();
            c
        }
    };
    if let Some(v) = hp.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = hp.heads {
        cfg.heads = v;
    }
    if let Some(v) = hp.layers {
        cfg.layers = v;
    }
    if let Some(v) = hp.feature_dim {
        if matches!(cfg.encoder, EncoderConfig::Passthrough) && v != cfg.feature_dim {
            return Err(Failure::Usage("--feature-dim must match the feature length of the records".into()));
        }
        cfg.feature_dim = v;
    }
    if let Some(v) = hp.dropout {
        cfg.dropout = v;
    }
    if let Some(v) = hp.visual_dropout {
        cfg.visual_dropout = v;
    }
    if let Some(v) = hp.token_dropout {
        cfg.token_dropout = v;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> CliResult<()> {
    let (mut config, mut hp) = preset_values(a.preset);
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let file: Hyper = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        hp.overlay(file);
    }
    hp.overlay(a.hp);
    config.seed = a.seed.seed;
    if let Some(v) = hp.lambda {
        config.lambda = v;
    }
    if let Some(v) = hp.lr {
        config.learning_rate = v;
    }
    if let Some(v) = hp.weight_decay {
        config.weight_decay = v;
    }
    if let Some(v) = hp.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = hp.epochs {
        config.epochs = v;
    }
    if let Some(v) = hp.clip_norm {
        config.clip_norm = (v > 0.0).then_some(v);
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let train_set = corpus::load_jsonl(&a.data.join("train.jsonl"))?;
    let val_set = corpus::load_jsonl(&a.data.join("val.jsonl"))?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation splits must be nonempty".into()).into());
    }

    let (mut model, mut trainer) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let trainer = Trainer::resume(config.clone(), &ckpt)?;
            (ckpt.model, trainer)
        }
        None => {
            let templates = load_templates(a.templates.as_deref(), &a.data, train_set[0].labels.len())?;
            let texts: Vec<String> = train_set.iter().map(|r| r.report.clone()).collect();
            let vocab = train_bpe(&texts, hp.vocab_size.unwrap_or(512))?.vocab;
            let cfg = model_config(&train_set[0], &templates, vocab.len(), &hp)?;
            let model = IihtModel::new(cfg, templates, vocab, config.seed)?;
            (model, Trainer::new(config.clone())?)
        }
    };
    info!(
        "model: {} parameters, vocab {}, e={}",
        model.params.num_scalars(),
        model.vocab.len(),
        model.config.hidden
    );

    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let mut log = Vec::new();
    while trainer.epoch < config.epochs {
        match trainer.run_epoch(&mut model, &train_set, &val_set) {
            Ok(m) => {
                info!(
                    "epoch {} train {:.4} val {:.4} L_G/token {:.4} state_acc {:.3}",
                    m.epoch, m.train_loss, m.val_loss, m.token_nll, m.state_acc
                );
                log.push(m);
            }
            Err(e) => {
                // the trainer has rolled back to the last good state
                trainer.checkpoint(&model).save(&a.out)?;
                training::write_metrics_csv(&log, &log_path)?;
                return Err(e.into());
            }
        }
    }
    trainer.checkpoint(&model).save(&a.out)?;
    training::write_metrics_csv(&log, &log_path)?;
    if let Some(last) = log.last() {
        println!(
            "epoch {} train_loss {:.5} val_loss {:.5} token_acc {:.4} state_acc {:.4}",
            last.epoch, last.train_loss, last.val_loss, last.token_acc, last.state_acc
        );
    }
    println!("checkpoint {} log {}", a.out.display(), log_path.display());
    Ok(())
}

fn parse_overrides(sets: &[String], templates: &IndicatorTemplates) -> CliResult<Vec<StateOverride>> {
    let mut out: Vec<StateOverride> = Vec::new();
    for s in sets {
        let (ind, st) = s
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects INDICATOR=STATE, got '{s}'")))?;
        let t = templates
            .find_indicator(ind)
            .ok_or_else(|| Failure::Usage(format!("unknown indicator '{ind}'")))?;
        let m = templates
            .find_state(st)
            .ok_or_else(|| Failure::Usage(format!("unknown state '{st}'")))?;
        out.retain(|o| o.indicator != t);
        out.push(StateOverride::one_hot(t, m, templates.num_states()));
    }
    Ok(out)
}

fn pick_record(records: Vec<ReportRecord>, id: Option<&str>, index: Option<usize>) -> CliResult<ReportRecord> {
    match (id, index) {
        (Some(id), _) => records
            .into_iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::contract(format!("no record with id '{id}'")).into()),
        (None, i) => {
            let i = i.unwrap_or(0);
            let n = records.len();
            records
                .into_iter()
                .nth(i)
                .ok_or_else(|| Error::contract(format!("index {i} out of range for {n} records")).into())
        }
    }
}

fn generate(a: GenerateArgs) -> CliResult<()> {
    let model = Checkpoint::load(&a.checkpoint)?.model;
    let overrides = parse_overrides(&a.set, &model.templates)?;
    let record = pick_record(corpus::load_jsonl(&a.data)?, a.id.as_deref(), a.index)?;
    let out = decoding::generate(&model, &record.visual, &a.decode.options(overrides))?;
    let t = &model.templates;
    let forced = |i: usize| out.overrides.iter().find(|o| o.indicator == i).map(|o| argmax(&o.row));

    if a.json {
        let rows: Vec<serde_json::Value> = (0..t.num_indicators())
            .map(|i| {
                serde_json::json!({
                    "indicator": t.indicator_name(i),
                    "alpha": out.alpha.row(i),
                    "predicted": t.state_name(argmax(out.alpha.row(i))),
                    "override": forced(i).map(|m| t.state_name(m)),
                })
            })
            .collect();
        let obj = serde_json::json!({
            "id": record.id,
            "report": out.text,
            "tokens": out.tokens,
            "log_prob": out.log_prob,
            "indicators": rows,
        });
        println!("{}", serde_json::to_string_pretty(&obj).map_err(Error::from)?);
        return Ok(());
    }

    println!("{}", out.text);
    println!();
    let width = t.indicator_names().iter().map(String::len).max().unwrap_or(9).max(9);
    let mut header = format!("{:width$}", "indicator");
    for m in 0..t.num_states() {
        header += &format!(" {:>10}", t.state_name(m));
    }
    println!("{header}  predicted");
    for i in 0..t.num_indicators() {
        let mut line = format!("{:width$}", t.indicator_name(i));
        for p in out.alpha.row(i) {
            line += &format!(" {p:>10.4}");
        }
        line += &format!("  {}", t.state_name(argmax(out.alpha.row(i))));
        if let Some(m) = forced(i) {
            line += &format!(" (set to {})", t.state_name(m));
        }
        println!("{line}");
    }
    println!("log-prob {:.4}", out.log_prob);
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let model = Checkpoint::load(&a.checkpoint)?.model;
    let records = corpus::load_jsonl(&a.data)?;
    if records.is_empty() {
        return Err(Error::contract(format!("{} holds no records", a.data.display())).into());
    }
    let report = decoding::evaluate(&model, &records, &a.decode.options(Vec::new()))?;
    let json = report.to_json()?;
    println!("{json}");
    if let Some(path) = &a.out {
        std::fs::write(path, json + "\n").map_err(|e| Error::file(path, e))?;
    }
    Ok(())
}

fn gradcheck(a: SeedArg) -> CliResult<()> {
    let entries = verify::gradient_suite(a.seed)?;
    let mut failed = Vec::new();
    for e in &entries {
        let ok = e.report.passed(TOLERANCE);
        println!(
            "{:<22} {:>4} instances {:>7} entries  max rel error {:.2e}  {}",
            e.name,
            e.instances,
            e.report.entries,
            e.report.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(e.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))).into())
    }
}

fn inspect(a: InspectArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let m = &ckpt.model;
    println!("format version {}", training::CHECKPOINT_VERSION);
    println!("epoch {} step {}", ckpt.epoch, ckpt.step);
    println!("model {}", serde_json::to_string(&m.config).map_err(Error::from)?);
    println!("train {}", serde_json::to_string(&ckpt.train_config).map_err(Error::from)?);
    println!(
        "indicators {} states {} subword vocab {} phrase vocab {}",
        m.templates.num_indicators(),
        m.templates.num_states(),
        m.vocab.len(),
        m.templates.vocab().len()
    );
    for (path, t) in m.params.iter() {
        println!("  {path} {:?}", t.shape());
    }
    println!("{} tensors, {} scalars", m.params.len(), m.params.num_scalars());
    Ok(())
}
