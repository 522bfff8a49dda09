//! `sotk`: the corpus pipeline from dump files to mined candidates and
//! fine-tune metrics.
//!
//! Every subcommand prints one JSON line on success. Exit codes: 0 success,
//! 1 usage error (bad flags, bad config, missing inputs), 2 data error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::{ConfigError, RawConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "sotk", version, about = "StackOverflow corpus pipeline")]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, env = "SOTK_CONFIG")]
    config: Option<PathBuf>,
    /// Override any setting, e.g. `--set tokenizer.vocab_size=8000`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Root seed (overrides `run.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log verbosity on stderr; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Jsonl,
    Shard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    InverseFrequency,
    Balanced,
    Uniform,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Load Posts/Comments/PostHistory XML into a record store.
    Ingest {
        #[arg(long)]
        posts: Option<String>,
        #[arg(long)]
        comments: Option<String>,
        #[arg(long)]
        history: Option<String>,
        #[arg(long)]
        store: Option<String>,
    },
    /// Filter answers and write the pre-training corpus.
    BuildCorpus {
        #[arg(long)]
        store: Option<String>,
        /// `jsonl` writes `paths.corpus`; `shard` encodes with `paths.vocab`
        /// into `paths.shard`.
        #[arg(long, value_enum, default_value_t = FormatArg::Jsonl)]
        format: FormatArg,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        vocab: Option<String>,
        #[arg(long)]
        min_score: Option<i64>,
        #[arg(long)]
        min_comments: Option<usize>,
    },
    /// Train the byte-level BPE vocabulary on the corpus.
    TrainTokenizer {
        #[arg(long)]
        corpus: Option<String>,
        #[arg(long)]
        vocab: Option<String>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        sample_fraction: Option<f64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Corpus statistics and length histogram.
    Stats {
        #[arg(long)]
        corpus: Option<String>,
        /// Histogram over token counts using `paths.vocab`.
        #[arg(long)]
        tokens: bool,
        #[arg(long)]
        vocab: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Parameter count, token requirement, cost and batch plan.
    Plan {
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        positions: Option<usize>,
        #[arg(long)]
        untied: bool,
        #[arg(long)]
        gpu_hours: Option<f64>,
        #[arg(long)]
        micro_batch: Option<usize>,
        /// Throughput; when given, checks whether `gpu_hours` reaches the
        /// token requirement.
        #[arg(long)]
        tokens_per_hour: Option<f64>,
    },
    /// Masked-language-model pre-training on the token shard.
    Pretrain {
        #[arg(long)]
        shard: Option<String>,
        #[arg(long)]
        vocab: Option<String>,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Fine-tune a checkpoint with weighted cross-entropy and predict.
    Finetune {
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        train: Option<String>,
        #[arg(long)]
        eval: Option<String>,
        #[arg(long)]
        predictions: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Run the three obsolete-answer heuristics.
    Mine {
        #[arg(long)]
        store: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Draw a balanced sample of candidates for annotation.
    SampleAnnotations {
        #[arg(long)]
        candidates: Option<String>,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Cohen's kappa between two annotators.
    Kappa {
        #[arg(long)]
        annotations: Option<String>,
        #[arg(long)]
        sample: Option<String>,
        #[arg(long = "annotator-a")]
        annotator_a: Option<String>,
        #[arg(long = "annotator-b")]
        annotator_b: Option<String>,
    },
    /// Weighted accuracy, recall and F1 from a predictions file.
    Eval {
        #[arg(long)]
        predictions: Option<String>,
        #[arg(long)]
        out: Option<String>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        classes: Option<usize>,
    },
}

fn put<V: ToString>(out: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<V>) {
    if let Some(v) = v {
        out.push((key, v.to_string()));
    }
}

impl Command {
    /// Flags that stand for config keys.
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o = Vec::new();
        match self {
            Command::Ingest {
                posts,
                comments,
                history,
                store,
            } => {
                put(&mut o, "paths.posts", posts);
                put(&mut o, "paths.comments", comments);
                put(&mut o, "paths.history", history);
                put(&mut o, "paths.store", store);
            }
            Command::BuildCorpus {
                store,
                format,
                out,
                vocab,
                min_score,
                min_comments,
            } => {
                put(&mut o, "paths.store", store);
                let out_key = match format {
                    FormatArg::Jsonl => "paths.corpus",
                    FormatArg::Shard => "paths.shard",
                };
                put(&mut o, out_key, out);
                put(&mut o, "paths.vocab", vocab);
                put(&mut o, "filter.min_score", min_score);
                put(&mut o, "filter.min_comments", min_comments);
            }
            Command::TrainTokenizer {
                corpus,
                vocab,
                vocab_size,
                sample_fraction,
                threads,
            } => {
                put(&mut o, "paths.corpus", corpus);
                put(&mut o, "paths.vocab", vocab);
                put(&mut o, "tokenizer.vocab_size", vocab_size);
                put(&mut o, "tokenizer.sample_fraction", sample_fraction);
                put(&mut o, "tokenizer.threads", threads);
            }
            Command::Stats {
                corpus, vocab, out, ..
            } => {
                put(&mut o, "paths.corpus", corpus);
                put(&mut o, "paths.vocab", vocab);
                put(&mut o, "paths.stats", out);
            }
            Command::Plan {
                layers,
                hidden,
                vocab_size,
                positions,
                untied,
                gpu_hours,
                micro_batch,
                ..
            } => {
                put(&mut o, "model.layers", layers);
                put(&mut o, "model.hidden", hidden);
                put(&mut o, "tokenizer.vocab_size", vocab_size);
                put(&mut o, "sequence.max_len", positions);
                if *untied {
                    o.push(("model.tied", "false".into()));
                }
                put(&mut o, "cost.gpu_hours", gpu_hours);
                put(&mut o, "batch.micro_batch", micro_batch);
            }
            Command::Pretrain {
                shard,
                vocab,
                checkpoint,
                steps,
                lr,
            } => {
                put(&mut o, "paths.shard", shard);
                put(&mut o, "paths.vocab", vocab);
                put(&mut o, "paths.checkpoint", checkpoint);
                put(&mut o, "batch.steps", steps);
                put(&mut o, "batch.lr", lr);
            }
            Command::Finetune {
                checkpoint,
                train,
                eval,
                predictions,
                epochs,
                lr,
            } => {
                put(&mut o, "paths.checkpoint", checkpoint);
                put(&mut o, "paths.finetune_train", train);
                put(&mut o, "paths.finetune_eval", eval);
                put(&mut o, "paths.predictions", predictions);
                put(&mut o, "finetune.epochs", epochs);
                put(&mut o, "finetune.lr", lr);
            }
            Command::Mine { store, out } => {
                put(&mut o, "paths.store", store);
                put(&mut o, "paths.candidates", out);
            }
            Command::SampleAnnotations {
                candidates,
                out,
                size,
            } => {
                put(&mut o, "paths.candidates", candidates);
                put(&mut o, "paths.annotation_sample", out);
                put(&mut o, "miner.annotation_size", size);
            }
            Command::Kappa {
                annotations,
                sample,
                ..
            } => {
                put(&mut o, "paths.annotations", annotations);
                put(&mut o, "paths.annotation_sample", sample);
            }
            Command::Eval {
                predictions,
                out,
                mode,
                ..
            } => {
                put(&mut o, "paths.predictions", predictions);
                put(&mut o, "paths.report", out);
                if let Some(m) = mode {
                    let v = match m {
                        ModeArg::InverseFrequency => "inverse_frequency",
                        ModeArg::Balanced => "balanced",
                        ModeArg::Uniform => "uniform",
                    };
                    o.push(("metrics.mode", v.into()));
                }
            }
        }
        o
    }
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let mut raw = match &cli.config {
        Some(path) => RawConfig::load(path)?,
        None => RawConfig::default(),
    };
    for a in &cli.set {
        raw.set_assignment(a)?;
    }
    if let Some(seed) = cli.seed {
        raw.set("run.seed", seed.to_string())?;
    }
    for (k, v) in cli.command.overrides() {
        raw.set(k, v)?;
    }
    let cfg = raw.build()?;
    commands::dispatch(&cli.command, &cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();

    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("sotk: usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("sotk: data error: {msg}");
            ExitCode::from(2)
        }
    }
}
