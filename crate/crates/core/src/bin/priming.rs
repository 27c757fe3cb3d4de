use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use priming::finetune::FineTuneSetting;
use priming::harness::commands::{self, CommandArgs};

#[derive(Parser)]
#[command(version, about = "Priming experiments: data, pretraining, priming, fine-tuning, evaluation, reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured corpora as CoNLL files plus the vocabulary.
    GenerateData(Flags),
    /// Masked-token pretraining of the encoder.
    Pretrain(Flags),
    /// Prime an encoder; --setting picks the priming variant.
    Prime(Flags),
    /// Fine-tune one setting and score it on the test split.
    Finetune(Flags),
    /// Score a fine-tuned checkpoint.
    Evaluate(Flags),
    /// Run every configured setting on every target language and seed.
    Table(Flags),
    /// Run the priming-strategy by fine-tuning-strategy matrix.
    Matrix(Flags),
    /// Render markdown tables from the JSONL results in --out.
    Report(Flags),
}

#[derive(Args)]
struct Flags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    setting: Option<FineTuneSetting>,
    #[arg(long)]
    language: Option<String>,
}

impl From<Flags> for CommandArgs {
    fn from(f: Flags) -> Self {
        CommandArgs {
            config: f.config,
            seed: f.seed,
            out: f.out,
            init_checkpoint: f.init_checkpoint,
            setting: f.setting,
            language: f.language,
        }
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    let record = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{record}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_end().to_string()),
    };
    let result = match cli.command {
        Command::GenerateData(f) => commands::generate_data(&f.into()),
        Command::Pretrain(f) => commands::pretrain(&f.into()),
        Command::Prime(f) => commands::prime(&f.into()),
        Command::Finetune(f) => commands::finetune(&f.into()),
        Command::Evaluate(f) => commands::evaluate(&f.into()),
        Command::Table(f) => commands::table(&f.into()),
        Command::Matrix(f) => commands::matrix(&f.into()),
        Command::Report(f) => commands::report(&f.into()),
    };
    match result {
        Ok(outcome) => {
            println!("{}", serde_json::to_string(&outcome).expect("outcome serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
