use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use taskmoe::corpus::split_pair_key;
use taskmoe::model::Side;
use taskmoe::tasks::InferenceStrategy;
use taskmoe::{Error, Result};
use taskmoe_cli::{self as cli, Loaded, RouteDumpOptions, TaskSelector};

#[derive(Parser)]
#[command(name = "taskmoe", version, about = "Task-level mixture-of-experts translation lab")]
struct Args {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus described by the config.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the routed model, then the bilingual baselines.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint (its optimizer state included).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        skip_baselines: bool,
    },
    /// Fill the BLEU matrix and write the report.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the latest checkpoint of the run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<InferenceStrategy>,
    },
    /// Save the dense sub-network of one task.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Registry key, e.g. `fr` or `en-fr`.
        #[arg(long, conflicts_with = "pair")]
        task: Option<String>,
        /// A `src-tgt` pair, resolved through --strategy.
        #[arg(long, requires = "strategy")]
        pair: Option<String>,
        #[arg(long)]
        strategy: Option<InferenceStrategy>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write expert-utilization heatmaps and encoder/decoder overlap.
    RouteDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        side: Option<Side>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated `src-tgt` rows.
        #[arg(long, value_delimiter = ',')]
        pairs: Vec<String>,
        #[arg(long)]
        strategy: Option<InferenceStrategy>,
        /// Trace routing over every checkpoint in the same directory.
        #[arg(long)]
        series: bool,
    },
    /// Corpus BLEU of two line-aligned files.
    Bleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config } => {
            let run = Loaded::load(&config)?;
            let manifest = cli::gen_data(&run)?;
            for f in &manifest.files {
                println!("{}\t{}\t{}", f.split, f.path, f.lines);
            }
        }
        Command::Train {
            config,
            resume,
            skip_baselines,
        } => {
            let run = Loaded::load(&config)?;
            let data = cli::load_data(&run)?;
            let outcome = cli::train_moe(&run, &data, resume.as_deref(), |s, l| println!("{s}\t{l}"))?;
            if let Some(last) = outcome.checkpoints.last() {
                eprintln!("saved {}", last.display());
            }
            if !skip_baselines {
                for p in cli::train_baselines(&run, &data, |key, s, l| println!("{key}\t{s}\t{l}"))? {
                    eprintln!("saved {}", p.display());
                }
            }
        }
        Command::Evaluate {
            config,
            checkpoint,
            strategy,
        } => {
            let run = Loaded::load(&config)?;
            let matrix = cli::evaluate(&run, checkpoint.as_deref(), strategy)?;
            print!("{}", matrix.to_table());
        }
        Command::Extract {
            checkpoint,
            task,
            pair,
            strategy,
            out,
        } => {
            let selector = match (task, pair, strategy) {
                (Some(k), None, _) => TaskSelector::Key(k),
                (None, Some(p), Some(strategy)) => {
                    let (src, tgt) = split_pair_key(&p).ok_or_else(|| Error::config(format!("{p:?} is not of the form src-tgt")))?;
                    TaskSelector::Pair {
                        src: src.to_string(),
                        tgt: tgt.to_string(),
                        strategy,
                    }
                }
                _ => return Err(Error::config("give either --task or --pair with --strategy")),
            };
            let key = cli::extract(&checkpoint, &selector, &out)?;
            println!("extracted task {key} to {}", out.display());
        }
        Command::RouteDump {
            checkpoint,
            layer,
            side,
            out,
            pairs,
            strategy,
            series,
        } => {
            let dump = cli::route_dump(&RouteDumpOptions {
                checkpoint,
                layer,
                side,
                out,
                pairs,
                strategy,
                series,
            })?;
            print!("{}", dump.summary());
        }
        Command::Bleu { hyp, reference } => println!("{}", cli::bleu_files(&hyp, &reference)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
