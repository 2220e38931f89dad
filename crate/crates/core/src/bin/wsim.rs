use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wsim::cli::{self, ChainSelection, Options, Outcome};

#[derive(Parser)]
#[command(
    name = "wsim",
    version,
    about = "Weight similarity via hypothesis-training-testing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Classify raw layers instead of chain features.
    #[arg(long, global = true)]
    no_normalize: bool,
    /// Keep features at their raw scale.
    #[arg(long, global = true)]
    no_feature_norm: bool,
    /// Chain depth to emit, or `all`.
    #[arg(long, global = true, default_value = "all")]
    chain: ChainSelection,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    Generate,
    Normalize,
    Classify,
    Retrieve,
    Hypothesis,
    Cross,
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let (Some(config), Some(out)) = (args.config, args.out) else {
        eprintln!("error: --config <path> and --out <dir> are required");
        return ExitCode::from(cli::exit::CONFIG as u8);
    };
    let opts = Options {
        config,
        out,
        no_normalize: args.no_normalize,
        no_feature_norm: args.no_feature_norm,
        chain: args.chain,
        seed: args.seed,
    };
    let result = cli::init_threads().and_then(|_| match args.command {
        Command::Generate => cli::cmd_generate(&opts),
        Command::Normalize => cli::cmd_normalize(&opts),
        Command::Classify => cli::cmd_classify(&opts),
        Command::Retrieve => cli::cmd_retrieve(&opts),
        Command::Hypothesis => cli::cmd_hypothesis(&opts),
        Command::Cross => cli::cmd_cross(&opts),
    });
    match result {
        Ok(outcome) => {
            report(&outcome);
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code_for(&e) as u8)
        }
    }
}

fn report(outcome: &Outcome) {
    match outcome {
        Outcome::Archive(m) => println!("wrote {} weight blobs", m.entries.len()),
        Outcome::Features(files) => files.iter().for_each(|f| println!("wrote {}", f.display())),
        Outcome::Report(rows) => rows.iter().for_each(|r| {
            println!(
                "chain {}\t{}\t{}\t{}\t{:.4}",
                r.chain, r.protocol, r.features, r.split, r.accuracy
            )
        }),
        Outcome::Verdict(v) => {
            for e in &v.per_chain_errors {
                println!("chain {}\t{:?}\terror {:.4}", e.chain, e.protocol, e.error);
            }
            println!(
                "{} at alpha = {}",
                if v.accepted { "accepted" } else { "rejected" },
                v.alpha
            );
        }
    }
}
