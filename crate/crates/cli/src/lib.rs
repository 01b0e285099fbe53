//! The `hyperpeft` command line.

pub mod config;
pub mod pipeline;

use std::io::{self, Read as _};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hyperpeft::codec::{decode_output_with, encode_input, encode_pair, Sentinels};
use hyperpeft::corpus::{parse_conll, parse_json_lines, CorpusFormat, LOW_RESOURCE_FRACTIONS};
use hyperpeft::{Error, Result};

use config::{Overrides, RunConfig};
use pipeline::Which;

#[derive(Debug, Parser)]
#[command(name = "hyperpeft", version, about = "Hypernetwork-generated adapters and LoRA for multi-task sequence labelling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train/validation splits and manifests for each data fraction.
    Prepare(RunArgs),
    /// Train a hypernetwork over the configured tasks.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Decode every test set and print per-task micro-F1.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint step to load instead of the best one.
        #[arg(long)]
        checkpoint: Option<u64>,
        /// Score the gold outputs themselves; needs no trained model.
        #[arg(long)]
        replay_gold: bool,
    },
    /// Print sentinel-framed input/output pairs, one JSON object per line.
    Encode {
        /// CoNLL or JSON-lines file; stdin when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Treat the input as JSON lines.
        #[arg(long)]
        jsonl: bool,
        /// Frame a plain whitespace-separated sentence instead.
        #[arg(long)]
        text: Option<String>,
    },
    /// Parse generated text into one tag per word.
    Decode {
        #[arg(long)]
        length: usize,
        /// Comma-separated admissible types.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
        /// Generated text; stdin when absent.
        text: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_fraction)]
    pub fraction: Option<f64>,
    /// Comma-separated subset of the configured tasks.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<String>>,
    #[arg(long)]
    pub no_lora: bool,
    #[arg(long)]
    pub no_adapters: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_fraction(s: &str) -> std::result::Result<f64, String> {
    let f: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if LOW_RESOURCE_FRACTIONS.contains(&f) {
        Ok(f)
    } else {
        Err("must be one of 0.1, 0.2, 1.0".into())
    }
}

impl RunArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            fraction: self.fraction,
            tasks: self.tasks.clone(),
            no_lora: self.no_lora,
            no_adapters: self.no_adapters,
            out: self.out.clone(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingFiles(_)
        | Error::Parse { .. }
        | Error::InvalidAnnotation(_)
        | Error::InvalidLabel(_)
        | Error::InvalidInput(_)
        | Error::Capacity { .. } => 3,
        Error::NonFiniteLoss { .. } => 4,
        _ => 1,
    }
}

/// Runs one command, writing results to `out`.
pub fn execute(cli: Cli, out: &mut dyn io::Write) -> Result<()> {
    let io_err = |e| Error::io("<stdout>", e);
    match cli.command {
        Command::Prepare(args) => {
            let cfg = args.load()?;
            let fractions = match args.fraction {
                Some(f) => vec![f],
                None => LOW_RESOURCE_FRACTIONS.to_vec(),
            };
            for dir in pipeline::prepare(&cfg, &fractions)? {
                writeln!(out, "{}", dir.display()).map_err(io_err)?;
            }
        }
        Command::Train { run, resume } => {
            let cfg = run.load()?;
            let summary = pipeline::train(&cfg, resume)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&summary)?).map_err(io_err)?;
        }
        Command::Eval { run, checkpoint, replay_gold } => {
            let cfg = run.load()?;
            let which = checkpoint.map_or(Which::Best, Which::Step);
            let report = pipeline::evaluate(&cfg, which, replay_gold)?;
            write!(out, "{}", report.to_table()).map_err(io_err)?;
            for t in report.tasks.iter().filter(|t| t.quality_alarm) {
                log::warn!("{}: every output slot was malformed", t.task);
            }
        }
        Command::Encode { input, jsonl, text } => {
            let sentinels = Sentinels::default();
            if let Some(text) = text {
                let tokens: Vec<&str> = text.split_whitespace().collect();
                writeln!(out, "{}", encode_input(&tokens, &sentinels)?).map_err(io_err)?;
                return Ok(());
            }
            let (raw, path) = read_source(input.as_deref())?;
            let json = jsonl || input.as_deref().is_some_and(|p| CorpusFormat::from_path(p) == CorpusFormat::JsonLines);
            let loaded = if json {
                parse_json_lines(&raw, &path, "stdin")?
            } else {
                parse_conll(&raw, &path, "stdin")?
            };
            for w in &loaded.warnings {
                log::warn!("{}: {w}", path.display());
            }
            for seq in &loaded.sequences {
                writeln!(out, "{}", serde_json::to_string(&encode_pair(seq, &sentinels)?)?).map_err(io_err)?;
            }
        }
        Command::Decode { length, labels, text } => {
            let text = match text {
                Some(t) => t,
                None => read_source(None)?.0,
            };
            let set = labels.map(|l| l.into_iter().collect());
            let d = decode_output_with(&text, length, &Sentinels::default(), set.as_ref());
            let tags: Vec<&str> = d.labels.iter().map(|t| t.as_str()).collect();
            writeln!(out, "{}", tags.join(" ")).map_err(io_err)?;
            if d.malformed_slots > 0 {
                log::warn!("{} malformed slot(s) fell back to O", d.malformed_slots);
            }
        }
    }
    Ok(())
}

fn read_source(path: Option<&Path>) -> Result<(String, PathBuf)> {
    match path {
        Some(p) => Ok((std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?, p.to_path_buf())),
        None => {
            let mut s = String::new();
            io::stdin().lock().read_to_string(&mut s).map_err(|e| Error::io("<stdin>", e))?;
            Ok((s, PathBuf::from("<stdin>")))
        }
    }
}

/// Parses `args`, runs the command and returns the exit status.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match execute(cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
