//! `podep`: train, run, and inspect the character-level dependency parser.
//!
//! `train` fits a model and writes a checkpoint, `parse` fills the head and
//! deprel columns of CoNLL-U or raw pre-tokenized text, `eval` scores a
//! prediction file against gold, and `inspect` dumps the head-probability
//! matrix of a sentence. Settings resolve as defaults < `--config` file <
//! flags, and `PODEP_THREADS` caps the worker pool.

use std::fs;
use std::io::{Read, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use podep::conllu::{self, Sentence, Token};
use podep::decoder::DecodeMode;
use podep::metrics::compare_sentences;
use podep::model::{AttentionMode, ModelConfig};
use podep::training::{self, parse_with_params, TrainOptions};
use podep::{Model32, ParseResult};
use rayon::prelude::*;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "podep", version, about = "Character-level neural dependency parser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint
    Train(TrainArgs),
    /// Parse CoNLL-U or raw pre-tokenized text with a trained model
    Parse(ParseArgs),
    /// Score a prediction file against gold
    Eval(EvalArgs),
    /// Print a sentence's head-probability matrix as TSV
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Attention {
    Soft,
    Hard,
}

impl From<Attention> for AttentionMode {
    fn from(a: Attention) -> Self {
        match a {
            Attention::Soft => AttentionMode::Soft,
            Attention::Hard => AttentionMode::Hard,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training treebank (CoNLL-U)
    #[arg(long, value_name = "FILE")]
    train: PathBuf,
    /// Development treebank; drives early stopping and checkpoint selection
    #[arg(long, value_name = "FILE")]
    dev: Option<PathBuf>,
    /// Where to write the checkpoint
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// TOML settings file with [model] and [train] tables and a seed
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Initialization and shuffling seed
    #[arg(long)]
    seed: Option<u64>,
    /// Toggle the morphological attribute heads
    #[arg(long = "pos-head", value_name = "on|off")]
    pos_head: Option<Switch>,
    /// Which head annotation feeds the labeler
    #[arg(long, value_enum)]
    attention: Option<Attention>,
    /// Tree decoding strategy for the dev evaluation
    #[arg(long, value_name = "MODE")]
    decode: Option<DecodeMode>,
    /// Skip punctuation in the dev score
    #[arg(long = "exclude-punct")]
    exclude_punct: bool,
    /// Append the per-epoch JSON records to this file as well as stdout
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ParseArgs {
    /// Trained checkpoint
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Input file; stdin when omitted. Tab or `#` lines mean CoNLL-U,
    /// anything else is read as one space-separated sentence per line
    #[arg(long, value_name = "FILE")]
    test: Option<PathBuf>,
    /// Output file; stdout when omitted
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Tree decoding strategy
    #[arg(long, value_name = "MODE")]
    decode: Option<DecodeMode>,
}

#[derive(Args)]
struct EvalArgs {
    /// Gold treebank (CoNLL-U)
    gold: PathBuf,
    /// Predicted treebank, aligned with gold
    pred: PathBuf,
    /// Drop tokens whose gold UPOS is PUNCT
    #[arg(long = "exclude-punct")]
    exclude_punct: bool,
    /// Print one JSON object instead of the table
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// Trained checkpoint
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Pre-tokenized words of one sentence; stdin lines when omitted
    #[arg(value_name = "WORD")]
    words: Vec<String>,
}

/// On-disk settings, every part optional.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    model: Option<ModelConfig>,
    train: Option<TrainOptions>,
}

struct Settings {
    seed: u64,
    config: ModelConfig,
    options: TrainOptions,
}

/// Defaults, overlaid by the TOML file, overlaid by explicit flags.
fn resolve(args: &TrainArgs) -> Result<Settings> {
    let mut seed = 1u64;
    let mut config = ModelConfig::default();
    let mut options = TrainOptions::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let file: FileConfig = toml::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        if let Some(s) = file.seed {
            seed = s;
        }
        if let Some(m) = file.model {
            config = m;
        }
        if let Some(t) = file.train {
            options = t;
        }
    }
    if let Some(s) = args.seed {
        seed = s;
    }
    if let Some(p) = args.pos_head {
        config.tagger.pos_head_enabled = matches!(p, Switch::On);
    }
    if let Some(a) = args.attention {
        config.scorer.attention = a.into();
    }
    if let Some(d) = args.decode {
        options.decode = d;
    }
    if args.exclude_punct {
        options.exclude_punct = true;
    }
    Ok(Settings { seed, config, options })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let settings = resolve(&args)?;
    let train_corpus = conllu::parse_file(&args.train)
        .with_context(|| format!("cannot read training data {}", args.train.display()))?;
    let dev_corpus = match &args.dev {
        Some(path) => conllu::parse_file(path)
            .with_context(|| format!("cannot read dev data {}", path.display()))?,
        None => Vec::new(),
    };
    let mut log_file = match &args.log {
        Some(path) => Some(
            fs::File::create(path)
                .with_context(|| format!("cannot create log {}", path.display()))?,
        ),
        None => None,
    };

    let outcome = training::train::<f32>(
        settings.config,
        &train_corpus,
        &dev_corpus,
        settings.seed,
        &settings.options,
        &mut |record| {
            let line = serde_json::to_string(record).expect("log record serializes");
            println!("{line}");
            if let Some(f) = &mut log_file {
                let _ = writeln!(f, "{line}");
            }
        },
    )?;

    outcome
        .model
        .save_to_path(&args.model)
        .with_context(|| format!("cannot write checkpoint {}", args.model.display()))?;
    eprintln!(
        "trained {} epochs (best epoch {}, dev UAS {:.2}), dropped {} bad sentences, wrote {}",
        outcome.epochs_run,
        outcome.best_epoch,
        outcome.best_uas.max(0.0),
        outcome.dropped_sentences,
        args.model.display()
    );
    Ok(())
}

/// Either real CoNLL-U or bare space-separated lines promoted to sentences.
fn read_input(text: &str) -> Result<Vec<Sentence>> {
    let looks_conllu = text.lines().any(|l| l.contains('\t') || l.starts_with('#'));
    if looks_conllu {
        return Ok(conllu::parse_str(text)?);
    }
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| Sentence {
            tokens: line
                .split_whitespace()
                .enumerate()
                .map(|(i, form)| Token {
                    id: i + 1,
                    form: form.to_string(),
                    lemma: String::new(),
                    upos: String::new(),
                    xpos: String::new(),
                    feats: String::new(),
                    head: 0,
                    deprel: String::new(),
                    deps: String::new(),
                    misc: String::new(),
                })
                .collect(),
            comments: Vec::new(),
        })
        .collect())
}

fn read_to_string(path: Option<&PathBuf>) -> Result<String> {
    match path {
        Some(p) => {
            fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))
        }
        None => {
            let mut text = String::new();
            std::io::stdin().read_to_string(&mut text).context("cannot read stdin")?;
            Ok(text)
        }
    }
}

fn write_output(path: Option<&PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_parse(args: ParseArgs) -> Result<()> {
    let model = Model32::load_from_path(&args.model)
        .with_context(|| format!("cannot load model {}", args.model.display()))?;
    let decode = args.decode.unwrap_or_default();
    let mut sentences = read_input(&read_to_string(args.test.as_ref())?)?;

    let preds: Vec<ParseResult> = sentences
        .par_iter()
        .map(|s| {
            if s.is_empty() {
                return ParseResult { heads: Vec::new(), labels: Vec::new(), used_fallback: false };
            }
            let char_ids: Vec<Vec<usize>> =
                s.tokens.iter().map(|t| model.lexicon.encode_word(&t.form)).collect();
            parse_with_params(&model.config, &model.params, &char_ids, decode, false).0
        })
        .collect();

    for (sentence, pred) in sentences.iter_mut().zip(&preds) {
        for (i, token) in sentence.tokens.iter_mut().enumerate() {
            token.head = pred.heads[i];
            token.deprel = model.lexicon.label_name(pred.labels[i]).to_string();
        }
    }
    write_output(args.output.as_ref(), &conllu::write_conllu(&sentences))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let gold = conllu::parse_file(&args.gold)
        .with_context(|| format!("cannot read gold {}", args.gold.display()))?;
    let pred = conllu::parse_file(&args.pred)
        .with_context(|| format!("cannot read predictions {}", args.pred.display()))?;
    let report = compare_sentences(&gold, &pred, args.exclude_punct)?;
    if args.json {
        println!("{}", report.to_json_line());
    } else {
        println!("{report}");
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let model = Model32::load_from_path(&args.model)
        .with_context(|| format!("cannot load model {}", args.model.display()))?;
    let sentences: Vec<Vec<String>> = if args.words.is_empty() {
        let mut text = String::new();
        std::io::stdin().read_to_string(&mut text).context("cannot read stdin")?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    } else {
        vec![args.words.clone()]
    };
    let mut first = true;
    for forms in sentences {
        if forms.is_empty() {
            continue;
        }
        let char_ids: Vec<Vec<usize>> = forms.iter().map(|f| model.lexicon.encode_word(f)).collect();
        let (_, matrix) =
            parse_with_params(&model.config, &model.params, &char_ids, DecodeMode::Greedy, false);
        if !first {
            println!();
        }
        print!("{}", matrix.to_tsv(&forms));
        first = false;
    }
    Ok(())
}

fn main() -> Result<()> {
    if let Ok(n) = std::env::var("PODEP_THREADS") {
        let n: usize = n.parse().context("PODEP_THREADS must be a positive integer")?;
        if n == 0 {
            bail!("PODEP_THREADS must be a positive integer");
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Train(args) => cmd_train(args),
        Command::Parse(args) => cmd_parse(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}
