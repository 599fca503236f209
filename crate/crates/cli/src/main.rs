mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use msim::data::{
    load_checkpoint, load_nli, load_sts, save_checkpoint, synth_sts, tokenize,
    vocab_from_pairs, TokenizedBatch,
};
use msim::evaluation::evaluate_sts;
use msim::pooling::PoolingHead;
use msim::siamese::{SentencePair, SiameseModel};
use msim::training::{train, Objective, TrainConfig};
use msim::{Error, Result};

use config::{read_run_config, RunConfig};

#[derive(Parser)]
#[command(
    name = "msim",
    version,
    about = "Train, evaluate, and apply small siamese sentence encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a similarity or inference corpus
    Train(TrainArgs),
    /// Score a checkpoint against similarity pairs
    Eval(EvalArgs),
    /// Embed sentences, one vector per input line
    Embed(EmbedArgs),
    /// Generate a synthetic similarity corpus with known scores
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Training protocol; picks the objective, loader, and schedule defaults
    #[arg(long, value_enum)]
    task: Task,
    /// Continue from an existing checkpoint instead of a fresh model
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Checkpoint output path (overrides the config's output section)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss log output path (overrides the config's output section)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Task {
    /// Similarity regression on scored pairs (10 epochs, batch 32)
    Stsb,
    /// Three-way inference classification on labeled pairs (1 epoch, batch 16)
    Nli,
}

impl Task {
    fn objective(self) -> Objective {
        match self {
            Task::Stsb => Objective::Regression,
            Task::Nli => Objective::Classification,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Scored similarity pairs (TSV)
    #[arg(long)]
    data: PathBuf,
    /// Where to write the full report; the headline always prints to stdout
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Sentences, one per line
    #[arg(long)]
    input: PathBuf,
    /// Output TSV, one embedding per non-empty input line
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of pairs to generate
    #[arg(long)]
    pairs: usize,
    /// Vocabulary size of the generator
    #[arg(long, default_value_t = 24)]
    words: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output TSV (score, sentence, sentence)
    #[arg(long)]
    out: PathBuf,
}

/// Stable exit contract: 0 success, 2 input or configuration problems,
/// 3 numerical divergence, 4 undefined metric.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => 3,
        Error::Undefined(_) => 4,
        _ => 2,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Embed(args) => cmd_embed(args),
        Command::Synth(args) => cmd_synth(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

/// Creates the parent directory of an output path, so training cannot
/// finish and then fail to persist.
fn prepare_output(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn load_pairs(task: Task, path: &Path) -> Result<Vec<SentencePair>> {
    match task {
        Task::Stsb => load_sts(path),
        Task::Nli => {
            let data = load_nli(path)?;
            if data.skipped > 0 {
                eprintln!("note: skipped {} pairs without label consensus", data.skipped);
            }
            Ok(data.pairs)
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let run: RunConfig = read_run_config(&args.config)?;
    let out = args
        .out
        .or(run.output.checkpoint)
        .ok_or_else(|| Error::Config("no checkpoint output path (--out or [output])".into()))?;
    let log_path = args.log.or(run.output.log);

    // Validate every path before spending time on training.
    if !run.data.train.is_file() {
        return Err(Error::Input(format!(
            "training data {} does not exist",
            run.data.train.display()
        )));
    }
    prepare_output(&out)?;
    if let Some(p) = &log_path {
        prepare_output(p)?;
    }

    let objective = args.task.objective();
    let pairs = load_pairs(args.task, &run.data.train)?;

    let (mut model, vocab, head) = match &args.resume {
        Some(ckpt_path) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            let expected = run.encoder.to_config(ckpt.model.config().vocab_size);
            if expected != *ckpt.model.config() {
                return Err(Error::Config(format!(
                    "encoder section disagrees with checkpoint {}",
                    ckpt_path.display()
                )));
            }
            if let Some(head) = &run.head {
                if head != &ckpt.model.head {
                    return Err(Error::Config(format!(
                        "head section disagrees with checkpoint {}",
                        ckpt_path.display()
                    )));
                }
            }
            if objective == Objective::Classification && ckpt.model.classifier.is_none() {
                return Err(Error::Config(
                    "checkpoint has no pair classifier; start classification from scratch"
                        .into(),
                ));
            }
            let head = ckpt.model.head.clone();
            (ckpt.model, ckpt.vocab, head)
        }
        None => {
            let head = run.head.clone().unwrap_or(PoolingHead::Mean);
            let vocab = vocab_from_pairs(&pairs)?;
            let config = run.encoder.to_config(vocab.size());
            let with_classifier = objective == Objective::Classification;
            let model = SiameseModel::<f32>::new(config, head.clone(), with_classifier)?;
            (model, vocab, head)
        }
    };

    let train_cfg: TrainConfig = run.train.resolve(objective, &head);
    let log = train(&mut model, &vocab, &pairs, objective, &train_cfg)?;

    if let Some(p) = &log_path {
        fs::write(p, log.to_tsv())?;
    }
    save_checkpoint(&model, &train_cfg, &vocab, &out)?;

    for (i, mean) in log.epoch_mean.iter().enumerate() {
        println!("epoch {}/{} mean loss {mean:e}", i + 1, log.epoch_mean.len());
    }
    println!("saved checkpoint to {}", out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let pairs = load_sts(&args.data)?;
    let report = evaluate_sts(&ckpt.model, &ckpt.vocab, &pairs)?;
    if let Some(p) = &args.report {
        prepare_output(p)?;
        fs::write(p, report.to_key_values())?;
    }
    println!("{}", report.rendered());
    Ok(())
}

fn cmd_embed(args: EmbedArgs) -> Result<()> {
    const CHUNK: usize = 64;
    let ckpt = load_checkpoint(&args.ckpt)?;
    let max_len = ckpt.model.config().max_len;
    let text = fs::read_to_string(&args.input)?;
    let lines: Vec<&str> = text.lines().collect();
    let kept: Vec<&str> = lines.iter().copied().filter(|l| !l.trim().is_empty()).collect();
    let skipped = lines.len() - kept.len();

    prepare_output(&args.output)?;
    let mut out = fs::File::create(&args.output)?;
    for chunk in kept.chunks(CHUNK) {
        let rows: Result<Vec<_>> =
            chunk.iter().map(|l| tokenize(&ckpt.vocab, l, max_len)).collect();
        let batch = TokenizedBatch::from_rows(&rows?)?;
        let embedded = ckpt.model.embed(&batch)?;
        let h = embedded.shape()[1];
        for i in 0..chunk.len() {
            let row = &embedded.data()[i * h..(i + 1) * h];
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", line.join("\t"))?;
        }
    }
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} empty input lines");
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let pairs = synth_sts(args.pairs, args.words, args.seed)?;
    prepare_output(&args.out)?;
    let mut out = fs::File::create(&args.out)?;
    for p in &pairs {
        // Scores print with full precision so they parse back exactly.
        writeln!(out, "{}\t{}\t{}", p.score.unwrap(), p.text_a, p.text_b)?;
    }
    println!("wrote {} pairs to {}", pairs.len(), args.out.display());
    Ok(())
}
