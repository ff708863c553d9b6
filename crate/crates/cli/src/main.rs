mod commands;
mod io;
mod synth;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use multiway::config::Task;
use multiway::Error;

use commands::{Direction, EvalOptions};

#[derive(Debug, Parser)]
#[command(name = "mwt", version, about = "Multiway Transformer pretraining, finetuning and inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Masked data modeling pretraining from a run config.
    Pretrain { config: PathBuf },
    /// Task finetuning from a run config with a [finetune] section.
    Finetune {
        config: PathBuf,
        /// Overrides the task in the config: fusion-cls, two-pair-cls, retrieval, caption or classify.
        #[arg(long)]
        task: Option<String>,
    },
    /// Evaluates a checkpoint on a task data file and prints a metrics line.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        data: PathBuf,
        /// Also appends the metrics line to this JSON-lines file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        #[arg(long)]
        beam_size: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Parameter breakdown of a checkpoint or run config.
    Inspect { path: PathBuf },
    /// Generates a caption for each image.
    Caption {
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        beam_size: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Ranks images for texts (or texts for images) with the dual encoder.
    Retrieve {
        checkpoint: PathBuf,
        /// File listing image paths, one per line.
        #[arg(long)]
        images: PathBuf,
        /// Text file, one query or target per line.
        #[arg(long)]
        texts: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, value_enum, default_value_t = Direction::TextToImage)]
        direction: Direction,
    },
    /// Predicts the label whose text embedding is closest to each image.
    Classify {
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
    },
    /// Writes the synthetic desk corpus, task files and configs into a directory.
    Synth {
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        texts: usize,
        #[arg(long, default_value_t = 256)]
        images: usize,
        #[arg(long, default_value_t = 256)]
        pairs: usize,
        /// Examples per task file.
        #[arg(long, default_value_t = 64)]
        examples: usize,
        #[arg(long, default_value_t = 200)]
        steps: u64,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn parse_task(s: &str) -> Result<Task, Failure> {
    s.parse().map_err(|e: Error| Failure::Usage(e.to_string().trim_start_matches("invalid argument: ").to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Pretrain { config } => commands::pretrain(&config)?,
        Command::Finetune { config, task } => {
            let task = task.as_deref().map(parse_task).transpose()?;
            commands::finetune(&config, task)?
        }
        Command::Eval {
            checkpoint,
            task,
            data,
            out,
            labels,
            beam_size,
            max_len,
        } => {
            let task = parse_task(&task)?;
            let opts = EvalOptions {
                labels,
                beam_size,
                max_len,
            };
            commands::eval(&checkpoint, task, &data, out.as_deref(), &opts)?
        }
        Command::Inspect { path } => print!("{}", commands::inspect(&path)?),
        Command::Caption {
            checkpoint,
            images,
            beam_size,
            max_len,
        } => commands::caption(&checkpoint, &images, beam_size, max_len)?,
        Command::Retrieve {
            checkpoint,
            images,
            texts,
            k,
            direction,
        } => commands::retrieve_cmd(&checkpoint, &images, &texts, k, direction)?,
        Command::Classify {
            checkpoint,
            images,
            labels,
        } => commands::classify_cmd(&checkpoint, &images, &labels)?,
        Command::Synth {
            out,
            seed,
            texts,
            images,
            pairs,
            examples,
            steps,
            epochs,
        } => {
            let opts = synth::SynthOptions {
                seed,
                texts,
                images,
                pairs,
                examples,
                steps,
                epochs,
            };
            for path in synth::synth(&out, &opts)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error");
            eprintln!("error: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {}", one_line(&msg));
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            let code = match e {
                Error::MissingPath(_) | Error::Config(_) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
