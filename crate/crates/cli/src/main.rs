use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tdlm_cli::ablate::{self, AblateArgs};
use tdlm_cli::build_tree::{self, BuildTreeArgs};
use tdlm_cli::config::RunConfig;
use tdlm_cli::corpus::synthetic_text;
use tdlm_cli::eval::{self, EvalArgs};
use tdlm_cli::sample::{self, SampleArgs};
use tdlm_cli::train;
use tdlm_core::oracle::{run_suite, Suite};

#[derive(Parser)]
#[command(
    name = "tdlm",
    version,
    about = "Tree-structured discrete diffusion language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary tree from corpus embeddings.
    BuildTree(BuildTreeArgs),
    /// Train a denoiser, logging validation ELBO.
    Train(TrainArgs),
    /// Estimate the negative ELBO of a checkpoint.
    Eval(EvalArgs),
    /// Generate text from a checkpoint.
    Sample(SampleArgs),
    /// Run the numerical verification suites.
    Verify(VerifyArgs),
    /// Run grids over branching factor, level weights or step allocation.
    Ablate(AblateArgs),
    /// Write a synthetic English-like corpus.
    GenCorpus(GenCorpusArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (`key=value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    tree: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from `<out>/model.ckpt` when it exists.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// kolmogorov, mc, reverse, elbo, backward, params or all.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1 << 20)]
    bytes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::BuildTree(args) => print!("{}", build_tree::run(&args)?.render()),
        Command::Train(args) => {
            let mut cfg = RunConfig::default();
            if let Some(p) = &args.config {
                cfg.apply_file(p)?;
            }
            for kv in &args.set {
                cfg.assign(kv).with_context(|| format!("--set {kv}"))?;
            }
            if let Some(p) = args.corpus {
                cfg.corpus = p;
            }
            if let Some(p) = args.tree {
                cfg.tree = p;
            }
            if let Some(p) = args.out {
                cfg.out = p;
            }
            let s = train::train(&cfg, args.resume, true)?;
            println!(
                "done in {:.1}s; log {}",
                s.elapsed.as_secs_f64(),
                s.out.join("metrics.log").display()
            );
        }
        Command::Eval(args) => print!("{}", eval::render(&eval::run(&args)?)),
        Command::Sample(args) => {
            let s = sample::run(&args)?;
            for text in &s.texts {
                println!("{}", String::from_utf8_lossy(text));
            }
        }
        Command::Verify(args) => {
            let suite: Suite = args.suite.parse()?;
            let report = run_suite(suite, args.seed)?;
            print!("{}", report.render());
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablate(args) => {
            let rows = ablate::run(&args, true)?;
            if rows.is_empty() {
                println!("ablate: every grid is empty, nothing to run");
            } else {
                print!("{}", ablate::render(&rows));
            }
        }
        Command::GenCorpus(args) => {
            std::fs::write(&args.out, synthetic_text(args.bytes, args.seed))
                .with_context(|| format!("writing {}", args.out.display()))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tdlm_model::init_threads();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
