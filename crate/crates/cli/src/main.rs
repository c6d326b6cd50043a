mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trifuse::config::TextMode;
use trifuse::{Error, ErrorKind, Result, SynthSpec};

use commands::{AblateArgs, EvalArgs, PredictArgs, SynthArgs};
use config::RunArgs;

/// Multimodal emotion recognition with a three-branch transformer.
#[derive(Debug, Parser)]
#[command(name = "trifuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset
    Synth(SynthCli),
    /// Train a model and write model.ckpt, curve.csv and report.json
    Train(RunArgs),
    /// Score a checkpoint on one dataset split
    Eval(EvalArgs),
    /// Classify one sample
    Predict(PredictArgs),
    /// Train every requested mode with the same budget and tabulate the results
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthCli {
    /// Output JSONL path; the spec is written next to it as <name>.spec.json
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 70)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Class signal per modality in [0, 1]: image,audio,text
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.5,0.5")]
    informativeness: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    d_img: usize,
    #[arg(long, default_value_t = 8)]
    d_audio: usize,
    /// embeddings or tokens
    #[arg(long, default_value = "embeddings")]
    text_mode: String,
    /// Embedding width, or vocabulary size in token mode
    #[arg(long, default_value_t = 8)]
    text_dim: usize,
    /// Inclusive sequence length range for every modality: min,max
    #[arg(long, value_delimiter = ',', default_value = "2,6")]
    seq_len: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
}

impl SynthCli {
    fn into_args(self) -> Result<SynthArgs> {
        let informativeness: [f64; 3] = self.informativeness.as_slice().try_into().map_err(|_| {
            Error::Config(format!(
                "--informativeness takes three values (image,audio,text), got {}",
                self.informativeness.len()
            ))
        })?;
        let [lo, hi]: [usize; 2] = self
            .seq_len
            .as_slice()
            .try_into()
            .map_err(|_| Error::Config("--seq-len takes two values: min,max".into()))?;
        let text_mode = match self.text_mode.as_str() {
            "embeddings" => TextMode::Embeddings,
            "tokens" => TextMode::Tokens,
            other => {
                return Err(Error::Config(format!(
                    "--text-mode must be embeddings or tokens, got \"{other}\""
                )))
            }
        };
        let spec = SynthSpec {
            n_samples: self.n,
            d_img: self.d_img,
            d_audio: self.d_audio,
            text_mode,
            text_dim: self.text_dim,
            seq_len: [(lo, hi); 3],
            informativeness,
            separation: self.separation,
            val_fraction: self.val_fraction,
            test_fraction: self.test_fraction,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(SynthArgs { out: self.out, spec })
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth(args) => eprintln!("{}", commands::synth(args.into_args()?)?),
        Command::Train(args) => println!("{}", commands::train(args)?),
        Command::Eval(args) => println!("{}", commands::eval(args)?),
        Command::Predict(args) => println!("{}", commands::predict(args)?),
        Command::Ablate(args) => {
            let (table, all_ok) = commands::ablate(args)?;
            print!("{table}");
            if !all_ok {
                eprintln!("error: at least one mode failed");
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e.kind() {
                ErrorKind::Invalid => ExitCode::from(2),
                ErrorKind::Runtime => ExitCode::from(1),
            }
        }
    }
}
