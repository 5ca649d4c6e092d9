use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use esn_adjoint::pipeline::{self, Command, RunConfig, SEED_ENV, THREADS_ENV};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Verb {
    Generate,
    Train,
    Search,
    Predict,
    Stats,
    Sensitivity,
    Compare,
}

impl From<Verb> for Command {
    fn from(v: Verb) -> Self {
        match v {
            Verb::Generate => Command::Generate,
            Verb::Train => Command::Train,
            Verb::Search => Command::Search,
            Verb::Predict => Command::Predict,
            Verb::Stats => Command::Stats,
            Verb::Sensitivity => Command::Sensitivity,
            Verb::Compare => Command::Compare,
        }
    }
}

/// Parameter-aware echo state networks and adjoint climate sensitivities.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    #[arg(value_enum)]
    verb: Verb,
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; shared by all verbs of one experiment.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, env = THREADS_ENV)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = RunConfig::load(&args.config)
        .map(|c| c.with_seed(args.seed))
        .and_then(|c| pipeline::run(args.verb.into(), &c, &args.out));
    match result {
        Ok(outputs) => {
            for o in outputs {
                println!("{}", args.out.join(o).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
