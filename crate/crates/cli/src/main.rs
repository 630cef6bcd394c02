//! `seqtag`: train, evaluate and apply character-level BiLSTM-CRF taggers
//! from the command line, plus a built-in numeric self-check.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
//! Log verbosity is controlled with `RUST_LOG` (default `info`).

use std::fs::File;
use std::io::BufReader;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process;

use clap::{ArgAction, Args, Parser, Subcommand};
use log::{info, warn};

use seqtag_core::corpus::{parse_bio, parse_embeddings, serialize_bio, LabelSet, LabeledSentence};
use seqtag_core::eval::{extract_spans, format_report, format_report_kv, score};
use seqtag_core::model_io;
use seqtag_core::optim::{OptimizerConfig, OptimizerKind};
use seqtag_core::selfcheck;
use seqtag_core::train::{train, TrainConfig};
use seqtag_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "seqtag",
    version,
    about = "Character-level BiLSTM-CRF sequence tagger"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Train a model on a BIO column-format corpus.
    Train(TrainArgs),
    /// Score a model against a labeled corpus.
    Eval(EvalArgs),
    /// Label raw text or unlabeled column input.
    Tag(TagArgs),
    /// Run the built-in numeric oracle suites.
    Check(CheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus (BIO column format, built-in label set).
    #[arg(long)]
    train: PathBuf,
    /// Dev corpus; enables per-epoch F1 and a best checkpoint.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Where the trained model is written. With --dev, the best-dev
    /// checkpoint is also saved to `<model-out>.best`.
    #[arg(long)]
    model_out: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().embed_dim)]
    embed_dim: usize,
    #[arg(long, default_value_t = TrainConfig::default().hidden_dim)]
    hidden_dim: usize,
    /// Sentences longer than this are truncated.
    #[arg(long, default_value_t = TrainConfig::default().max_len)]
    max_len: usize,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    /// Dropout on the LSTM inputs, in [0, 1).
    #[arg(long, default_value_t = TrainConfig::default().dropout)]
    dropout: f64,
    /// Characters seen fewer times than this map to the unknown id.
    #[arg(long, default_value_t = TrainConfig::default().min_count)]
    min_count: usize,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    seed: u64,
    /// adam, gd or rmsprop.
    #[arg(long, default_value_t = String::from("adam"))]
    optimizer: String,
    /// Learning rate; defaults to the optimizer's canonical value.
    #[arg(long)]
    lr: Option<f64>,
    /// Adam first-moment decay.
    #[arg(long)]
    beta1: Option<f64>,
    /// Adam second-moment decay.
    #[arg(long)]
    beta2: Option<f64>,
    /// RMSprop cache decay.
    #[arg(long)]
    decay_rate: Option<f64>,
    /// Denominator stabilizer for adam and rmsprop.
    #[arg(long)]
    eps: Option<f64>,
    /// Clip gradients to this global norm (bare flag means 5.0).
    #[arg(long, num_args = 0..=1, default_missing_value = "5.0")]
    clip_norm: Option<f64>,
    /// Per-step exponential learning-rate decay factor in (0, 1].
    #[arg(long)]
    lr_decay: Option<f64>,
    /// Pretrained embeddings: one `char v1 .. v<embed-dim>` line per character.
    #[arg(long)]
    pretrained_embeddings: Option<PathBuf>,
    /// Forbid invalid BIO transitions at decode time.
    #[arg(long)]
    hard_bio_constraints: bool,
    /// Apply tanh to the emission projection (pass `false` for linear).
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    tanh_projection: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Model file written by `seqtag train`.
    #[arg(long)]
    model: PathBuf,
    /// Labeled corpus to score against.
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args)]
struct TagArgs {
    /// Model file written by `seqtag train`.
    #[arg(long)]
    model: PathBuf,
    /// Input text: raw sentences or unlabeled column format.
    #[arg(long)]
    input: PathBuf,
    /// Output path for the labeled BIO column file.
    #[arg(long)]
    out: PathBuf,
    /// Input layout: `raw` (one sentence per line), `column` (one
    /// character per line, blank line between sentences) or `auto`.
    #[arg(long, default_value_t = String::from("auto"))]
    format: String,
}

#[derive(Args)]
struct CheckArgs {
    /// Seed for the randomized suites.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            process::exit(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Tag(args) => cmd_tag(args),
        Command::Check(args) => cmd_check(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        process::exit(err.exit_code());
    }
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    let file = File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    Ok(BufReader::new(file))
}

fn read_corpus(path: &Path, label_set: &LabelSet) -> Result<Vec<LabeledSentence>> {
    parse_bio(open_reader(path)?, label_set)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let label_set = LabelSet::default();
    let train_data = read_corpus(&args.train, &label_set)?;
    let dev_data = match &args.dev {
        Some(path) => Some(read_corpus(path, &label_set)?),
        None => None,
    };
    let kind: OptimizerKind = args.optimizer.parse()?;
    let mut optimizer = OptimizerConfig::for_kind(kind);
    if let Some(v) = args.lr {
        optimizer.lr = v;
    }
    if let Some(v) = args.beta1 {
        optimizer.beta1 = v;
    }
    if let Some(v) = args.beta2 {
        optimizer.beta2 = v;
    }
    if let Some(v) = args.decay_rate {
        optimizer.decay_rate = v;
    }
    if let Some(v) = args.eps {
        optimizer.eps = v;
    }
    optimizer.clip_norm = args.clip_norm;
    optimizer.lr_decay = args.lr_decay;
    let pretrained_embeddings = match &args.pretrained_embeddings {
        Some(path) => Some(parse_embeddings(open_reader(path)?, args.embed_dim)?),
        None => None,
    };
    let cfg = TrainConfig {
        embed_dim: args.embed_dim,
        hidden_dim: args.hidden_dim,
        max_len: args.max_len,
        epochs: args.epochs,
        batch_size: args.batch_size,
        dropout: args.dropout,
        min_count: args.min_count,
        seed: args.seed,
        hard_bio_constraints: args.hard_bio_constraints,
        tanh_projection: args.tanh_projection,
        optimizer,
        pretrained_embeddings,
    };
    info!(
        "training on {} sentences ({} for dev), {} epochs",
        train_data.len(),
        dev_data.as_ref().map_or(0, Vec::len),
        cfg.epochs
    );
    let outcome = train(&cfg, &label_set, &train_data, dev_data.as_deref(), |s| {
        match s.dev_f1 {
            Some(f1) => info!(
                "epoch {:>3}: mean loss {:.6}, dev F1 {f1:.4}",
                s.epoch, s.mean_loss
            ),
            None => info!("epoch {:>3}: mean loss {:.6}", s.epoch, s.mean_loss),
        }
        ControlFlow::Continue(())
    })?;
    model_io::save(&outcome.tagger, &args.model_out)?;
    info!("saved model to {}", args.model_out.display());
    if let Some(best) = &outcome.best {
        let path = best_checkpoint_path(&args.model_out);
        model_io::save(&best.tagger, &path)?;
        info!(
            "saved best checkpoint (epoch {}, dev F1 {:.4}) to {}",
            best.epoch,
            best.dev_f1,
            path.display()
        );
    }
    Ok(())
}

fn best_checkpoint_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".best");
    PathBuf::from(name)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let tagger = model_io::load(&args.model)?;
    let data = read_corpus(&args.test, tagger.label_set())?;
    let mut gold = Vec::with_capacity(data.len());
    let mut pred = Vec::with_capacity(data.len());
    for s in &data {
        gold.push(extract_spans(&s.labels)?);
        pred.push(extract_spans(&tagger.tag_chars(&s.chars)?)?);
    }
    let report = score(&gold, &pred)?;
    let types = tagger.label_set().entity_types();
    print!("{}", format_report(&report, &types));
    println!();
    print!("{}", format_report_kv(&report, &types));
    Ok(())
}

fn cmd_tag(args: TagArgs) -> Result<()> {
    let tagger = model_io::load(&args.model)?;
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", args.input.display())))?;
    let sentences = match args.format.as_str() {
        "raw" => raw_sentences(&text),
        "column" => column_sentences(&text)?,
        "auto" => {
            if looks_columnar(&text) {
                column_sentences(&text)?
            } else {
                raw_sentences(&text)
            }
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown input format {other:?} (expected raw, column or auto)"
            )))
        }
    };
    let mut labeled = Vec::with_capacity(sentences.len());
    for chars in sentences {
        let labels = tagger.tag_chars(&chars)?;
        labeled.push(LabeledSentence::new(chars, labels)?);
    }
    std::fs::write(&args.out, serialize_bio(&labeled))?;
    info!(
        "tagged {} sentences into {}",
        labeled.len(),
        args.out.display()
    );
    Ok(())
}

/// One sentence per line; whitespace is not taggable and is dropped.
fn raw_sentences(text: &str) -> Vec<Vec<char>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let chars: Vec<char> = line.chars().filter(|c| !c.is_whitespace()).collect();
        if chars.is_empty() {
            warn!("skipping empty line {}", i + 1);
        } else {
            out.push(chars);
        }
    }
    out
}

/// One character per line, blank line between sentences, `#` comments.
fn column_sentences(text: &str) -> Result<Vec<Vec<char>>> {
    let mut out = Vec::new();
    let mut current: Vec<char> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            continue;
        }
        if trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let token = fields.next().expect("non-empty line has a field");
        if fields.next().is_some() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "expected unlabeled input (a single character per line)".into(),
            });
        }
        let mut chars = token.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => current.push(c),
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected a single character, got {token:?}"),
                })
            }
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    Ok(out)
}

/// Column layout iff every content line is a single character. Files of
/// one-character raw sentences are read as columns; pass --format raw to
/// override.
fn looks_columnar(text: &str) -> bool {
    let mut content = false;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        content = true;
        if trimmed.chars().count() != 1 {
            return false;
        }
    }
    content
}

fn cmd_check(args: CheckArgs) -> Result<()> {
    let mut failure: Option<Error> = None;
    let mut record = |name: &str, outcome: std::result::Result<String, Error>| match outcome {
        Ok(detail) => println!("{name}: pass ({detail})"),
        Err(err) => {
            println!("{name}: FAIL ({err})");
            failure.get_or_insert(err);
        }
    };
    record(
        "crf-oracle",
        selfcheck::crf_oracle_suite(500, args.seed)
            .map(|d| format!("500 instances, max |delta log Z| {d:.3e}")),
    );
    record(
        "gradient-fd",
        selfcheck::gradient_fd_suite(args.seed).map(|w| format!("worst rel err {w:.3e}")),
    );
    record(
        "optimizer-quadratic",
        selfcheck::optimizer_quadratic_suite().map(|hits| {
            hits.iter()
                .map(|(kind, steps)| format!("{kind} {steps} steps"))
                .collect::<Vec<_>>()
                .join(", ")
        }),
    );
    match failure {
        None => Ok(()),
        Some(err) => Err(err),
    }
}
