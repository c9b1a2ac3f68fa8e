//! The `attn-nmt` command line: build-vocab, train, translate, evaluate.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 I/O
//! error.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attention::AttentionMode;
use crate::checkpoint::Checkpoint;
use crate::data::{load_parallel_corpus, split_train_validation, tokenize, EncodedPair, Vocabulary, DEFAULT_MAX_SIZE};
use crate::decode::{parallel_map, translate, DecodeConfig, DEFAULT_BEAM_WIDTH};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{
    ModelConfig, TranslationModel, DEFAULT_EMBED_DIM, DEFAULT_HIDDEN, DEFAULT_LAYERS, DEFAULT_MAX_DECODE_LEN,
};
use crate::train::{train, EpochLog, Optimizer, TrainConfig, TrainObserver, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Environment variable capping decode worker threads.
pub const THREADS_ENV: &str = "ATTN_NMT_THREADS";

pub const SRC_VOCAB_FILE: &str = "src.vocab";
pub const TGT_VOCAB_FILE: &str = "tgt.vocab";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train.log";

#[derive(Parser, Debug)]
#[command(name = "attn-nmt", version, about = "Attention-based neural machine translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build source and target vocabularies from a parallel corpus.
    BuildVocab(BuildVocabArgs),
    /// Train a model, writing checkpoints and a loss log to --out.
    Train(TrainArgs),
    /// Translate sentences from standard input, one per line.
    Translate(TranslateArgs),
    /// Score a model on a parallel test set and write a report.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_SIZE)]
    max_size: usize,
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    src_vocab: PathBuf,
    #[arg(long)]
    tgt_vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    val_split: Option<f64>,
    /// Continue from this checkpoint; its model and settings take precedence
    /// except for --epochs and --max-steps.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    optimizer: Option<Optimizer>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_EMBED_DIM)]
    embed_dim: usize,
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    hidden: usize,
    #[arg(long, default_value_t = DEFAULT_LAYERS)]
    layers: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_DECODE_LEN)]
    max_len: usize,
    /// `dot` or `uniform` (the no-alignment ablation).
    #[arg(long, default_value = "dot", value_parser = parse_attention)]
    attention: AttentionMode,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
    beam: usize,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    /// Override the checkpoint's maximum output length.
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    src_vocab: PathBuf,
    #[arg(long)]
    tgt_vocab: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    dump_attention: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    r#ref: PathBuf,
    #[arg(long)]
    src_vocab: PathBuf,
    #[arg(long)]
    tgt_vocab: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    report: PathBuf,
}

fn parse_attention(s: &str) -> std::result::Result<AttentionMode, String> {
    match s {
        "dot" => Ok(AttentionMode::Dot),
        "uniform" => Ok(AttentionMode::Uniform),
        other => Err(format!("unknown attention mode {other:?} (expected dot or uniform)")),
    }
}

/// Runs the CLI on the process's real streams and returns the exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(args, &mut stdin.lock(), &mut stdout.lock(), &mut stderr.lock())
}

/// Like [`cli_main`] with explicit streams.
pub fn run<I, T>(args: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    let result = match cli.command {
        Command::BuildVocab(a) => build_vocab(&a, stderr),
        Command::Train(a) => run_train(&a, stderr),
        Command::Translate(a) => run_translate(&a, stdin, stdout),
        Command::Evaluate(a) => run_evaluate(&a, stdout),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

/// Maps an error to the CLI's exit code.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_io() {
        EXIT_IO
    } else {
        EXIT_DATA
    }
}

fn threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Contract(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn build_vocab(a: &BuildVocabArgs, stderr: &mut dyn Write) -> Result<()> {
    let corpus = load_parallel_corpus(&a.src, &a.tgt)?;
    let src = Vocabulary::build(corpus.pairs.iter().map(|p| &p.source), a.max_size, a.min_freq)?;
    let tgt = Vocabulary::build(corpus.pairs.iter().map(|p| &p.target), a.max_size, a.min_freq)?;
    create_dir(&a.out_dir)?;
    src.save(&a.out_dir.join(SRC_VOCAB_FILE))?;
    tgt.save(&a.out_dir.join(TGT_VOCAB_FILE))?;
    let _ = writeln!(
        stderr,
        "pairs={} dropped={} src_vocab={} tgt_vocab={}",
        corpus.len(),
        corpus.dropped,
        src.len(),
        tgt.len()
    );
    Ok(())
}

/// Writes the loss log and checkpoints as training progresses.
struct RunWriter<'a> {
    dir: PathBuf,
    log: File,
    stderr: &'a mut dyn Write,
    val_split: f64,
    src_hash: [u8; 32],
    tgt_hash: [u8; 32],
}

impl RunWriter<'_> {
    fn save(&self, name: &str, model: &TranslationModel, state: &TrainState, config: &TrainConfig) -> Result<()> {
        Checkpoint {
            model: model.clone(),
            train_config: *config,
            state: state.clone(),
            val_split: self.val_split,
            src_vocab_hash: self.src_hash,
            tgt_vocab_hash: self.tgt_hash,
        }
        .save(&self.dir.join(name))
    }
}

impl TrainObserver for RunWriter<'_> {
    fn epoch_end(
        &mut self,
        log: &EpochLog,
        model: &TranslationModel,
        state: &TrainState,
        config: &TrainConfig,
    ) -> Result<()> {
        let line = log.to_line();
        let path = self.dir.join(TRAIN_LOG);
        writeln!(self.log, "{line}").map_err(|e| Error::io(&path, e))?;
        self.log.flush().map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(self.stderr, "{line}");
        if log.improved {
            self.save(BEST_CHECKPOINT, model, state, config)?;
        }
        if log.epoch.is_multiple_of(config.checkpoint_every) {
            self.save(LAST_CHECKPOINT, model, state, config)?;
        }
        Ok(())
    }

    fn finished(&mut self, model: &TranslationModel, state: &TrainState, config: &TrainConfig) -> Result<()> {
        self.save(LAST_CHECKPOINT, model, state, config)
    }
}

fn run_train(a: &TrainArgs, stderr: &mut dyn Write) -> Result<()> {
    let src_vocab = Vocabulary::load(&a.src_vocab)?;
    let tgt_vocab = Vocabulary::load(&a.tgt_vocab)?;
    let corpus = load_parallel_corpus(&a.src, &a.tgt)?;
    if corpus.is_empty() {
        return Err(Error::Contract("training corpus has no usable sentence pairs".into()));
    }

    let (mut model, mut state, config, val_split) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.check_vocabularies(&src_vocab, &tgt_vocab)?;
            let config = TrainConfig {
                epochs: a.epochs.unwrap_or(ck.train_config.epochs),
                max_steps: a.max_steps.or(ck.train_config.max_steps),
                ..ck.train_config
            };
            (ck.model, ck.state, config, ck.val_split)
        }
        None => {
            let defaults = TrainConfig::default();
            let config = TrainConfig {
                epochs: a.epochs.unwrap_or(defaults.epochs),
                batch_size: a.batch_size.unwrap_or(defaults.batch_size),
                learning_rate: a.lr.unwrap_or(defaults.learning_rate),
                clip_norm: a.clip_norm.unwrap_or(defaults.clip_norm),
                seed: a.seed.unwrap_or(defaults.seed),
                checkpoint_every: a.checkpoint_every.unwrap_or(defaults.checkpoint_every),
                optimizer: a.optimizer.unwrap_or(defaults.optimizer),
                max_steps: a.max_steps,
            };
            let model_config = ModelConfig {
                embed_dim: a.embed_dim,
                hidden: a.hidden,
                layers: a.layers,
                max_decode_len: a.max_len,
                attention: a.attention,
                ..ModelConfig::new(src_vocab.len(), tgt_vocab.len())
            };
            let model = TranslationModel::new(model_config, config.seed)?;
            (model, TrainState::default(), config, a.val_split.unwrap_or(0.1))
        }
    };
    config.validate()?;
    if !(0.0..1.0).contains(&val_split) {
        return Err(Error::Contract(format!(
            "--val-split must be in [0, 1), got {val_split}"
        )));
    }
    if model.config.src_vocab_size != src_vocab.len() || model.config.tgt_vocab_size != tgt_vocab.len() {
        return Err(Error::Schema("vocabulary sizes do not match the model".into()));
    }

    let encoded: Vec<EncodedPair> = corpus
        .pairs
        .iter()
        .map(|p| EncodedPair::from_pair(p, &src_vocab, &tgt_vocab))
        .collect();
    let (train_set, val_set) = split_train_validation(&encoded, val_split, config.seed);
    if train_set.is_empty() {
        return Err(Error::Contract("validation split leaves no training pairs".into()));
    }

    create_dir(&a.out)?;
    let log_path = a.out.join(TRAIN_LOG);
    let log = if a.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let _ = writeln!(
        stderr,
        "train_pairs={} val_pairs={} dropped={} params={}",
        train_set.len(),
        val_set.len(),
        corpus.dropped,
        crate::math::ParamSet::num_values(&model)
    );
    let mut writer = RunWriter {
        dir: a.out.clone(),
        log,
        stderr,
        val_split,
        src_hash: src_vocab.content_hash(),
        tgt_hash: tgt_vocab.content_hash(),
    };
    train(&mut model, &mut state, &train_set, &val_set, &config, &mut writer)?;
    Ok(())
}

struct Loaded {
    model: TranslationModel,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    decode: DecodeConfig,
}

fn load_for_inference(model: &Path, src_vocab: &Path, tgt_vocab: &Path, d: &DecodeArgs) -> Result<Loaded> {
    let ck = Checkpoint::load(model)?;
    let src_vocab = Vocabulary::load(src_vocab)?;
    let tgt_vocab = Vocabulary::load(tgt_vocab)?;
    ck.check_vocabularies(&src_vocab, &tgt_vocab)?;
    let decode = DecodeConfig {
        beam_width: d.beam,
        max_decode_len: d.max_len.unwrap_or(ck.model.config.max_decode_len),
        length_penalty_alpha: d.alpha,
    };
    decode.validate()?;
    Ok(Loaded {
        model: ck.model,
        src_vocab,
        tgt_vocab,
        decode,
    })
}

fn run_translate(a: &TranslateArgs, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> Result<()> {
    let l = load_for_inference(&a.model, &a.src_vocab, &a.tgt_vocab, &a.decode)?;
    let threads = threads()?;
    let mut input = Vec::new();
    stdin.read_to_end(&mut input)?;
    let lines = crate::data::split_lines(&input)?;
    let results = parallel_map(&lines, threads, |line| {
        if tokenize(line).is_empty() {
            return Ok(None);
        }
        translate(line, &l.src_vocab, &l.tgt_vocab, &l.model, &l.decode).map(Some)
    });
    let mut dump = match &a.dump_attention {
        Some(p) => Some((BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?), p)),
        None => None,
    };
    for r in results {
        let t = r?;
        writeln!(stdout, "{}", t.as_ref().map_or("", |t| t.text.as_str()))?;
        if let Some((w, p)) = &mut dump {
            let text = t.map(|t| t.attention_dump()).unwrap_or_default();
            writeln!(w, "{text}").map_err(|e| Error::io(p.as_path(), e))?;
        }
    }
    if let Some((mut w, p)) = dump {
        w.flush().map_err(|e| Error::io(p.as_path(), e))?;
    }
    stdout.flush()?;
    Ok(())
}

fn run_evaluate(a: &EvaluateArgs, stdout: &mut dyn Write) -> Result<()> {
    let l = load_for_inference(&a.model, &a.src_vocab, &a.tgt_vocab, &a.decode)?;
    let corpus = load_parallel_corpus(&a.src, &a.r#ref)?;
    let report = evaluate(
        &l.model,
        &l.src_vocab,
        &l.tgt_vocab,
        &corpus.pairs,
        &l.decode,
        threads()?,
    )?;
    let text = report.to_report_string();
    fs::write(&a.report, &text).map_err(|e| Error::io(&a.report, e))?;
    write!(stdout, "{text}")?;
    Ok(())
}
