use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dclr::{Run, RunConfig};

#[derive(Parser)]
#[command(name = "dclr", version, about = "Contrastive patch clustering and CRF refinement for slide segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `run.threads`; 1 gives bit-exact reruns.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run directory shared by all stages.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate synthetic slides with ground-truth masks.
    Gen,
    /// Contrastive pretraining and cluster fitting.
    Pretrain,
    /// Tumour probability maps for the test slides.
    Segment,
    /// CRF refinement of the probability maps.
    Refine,
    /// Dice and patch accuracy against ground truth.
    Eval,
}

fn execute(cli: &Cli) -> dclr::Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), cli.seed, cli.threads)?;
    let run = Run::new(cfg, &cli.out)?;
    match cli.command {
        Command::Gen => run.gen(),
        Command::Pretrain => run.pretrain().map(|_| ()),
        Command::Segment => run.segment(),
        Command::Refine => run.refine(),
        Command::Eval => {
            let report = run.eval()?;
            print!("{}", dclr::commands::render_summary(&report));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage message={first:?}");
            return ExitCode::from(2);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::FAILURE
        }
    }
}
