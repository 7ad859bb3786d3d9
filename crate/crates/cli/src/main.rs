use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sentreason_cli::{CliError, PipelineConfig, Produced, Run};
use sentreason_core::evaluation::SliceSelection;

/// Rationale generation, multi-task fine-tuning and evaluation for
/// aspect-level implicit sentiment analysis.
#[derive(Parser)]
#[command(name = "sentreason", version)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "sentreason.toml")]
    config: PathBuf,
    /// Run directory name; defaults to a hash of the configuration.
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert or load the dataset into canonical JSONL.
    Ingest {
        /// Check the input and print counts without writing anything.
        #[arg(long)]
        validate_only: bool,
    },
    /// Generate rationales and verification signals for the train split.
    Generate,
    /// Assemble the multi-task training corpus.
    Build,
    /// Fine-tune the sequence-to-sequence backend.
    Train,
    /// Search the loss weights on the validation split.
    Search,
    /// Evaluate the trained model on the test split.
    Eval {
        #[arg(long, value_enum, default_value_t = SliceArg::Both)]
        slice: SliceArg,
    },
    /// Emit the final result tables.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum SliceArg {
    All,
    Isa,
    Both,
}

fn show<T>(p: Produced<T>) {
    for line in p.lines {
        println!("{line}");
    }
    for path in p.paths {
        println!("wrote {}", path.display());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let run = Run::new(config, cli.run_id);
    println!("run {} at {}", run.id, run.dir.display());
    match cli.command {
        Command::Ingest { validate_only } => show(sentreason_cli::ingest(&run, validate_only)?),
        Command::Generate => show(sentreason_cli::generate(&run)?),
        Command::Build => show(sentreason_cli::build(&run)?),
        Command::Train => show(sentreason_cli::train(&run)?),
        Command::Search => show(sentreason_cli::search(&run)?),
        Command::Eval { slice } => {
            let which = match slice {
                SliceArg::All => SliceSelection::All,
                SliceArg::Isa => SliceSelection::Isa,
                SliceArg::Both => SliceSelection::Both,
            };
            show(sentreason_cli::eval(&run, which)?)
        }
        Command::Report => show(sentreason_cli::report(&run)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
