//! `tdlm sample`: coarse-to-fine generation from a checkpoint.

use std::fs;
use std::path::PathBuf;

use anyhow::{ensure, Context, Result};
use clap::Args;
use tdlm_core::sampler::{
    allocate_steps, generate, AllocationPolicy, Generation, GenerationConfig,
};
use tdlm_core::{NoiseSchedule, TokenTree};
use tdlm_model::checkpoint;

use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub tree: PathBuf,
    /// Tokens per sample; defaults to the checkpoint's sequence length.
    #[arg(long)]
    pub len: Option<usize>,
    /// Total reverse steps across all levels.
    #[arg(long, default_value_t = 256)]
    pub steps: usize,
    /// `balanced` or per-level counts from the top level down, e.g. `448,64`.
    #[arg(long, default_value = "balanced")]
    pub alloc: String,
    #[arg(long, default_value_t = 1.0)]
    pub temp: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub rows: usize,
    /// Per-step height histograms, one `step <k> t <t> height_histogram ...` line each.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
}

pub struct Sampled {
    pub generation: Generation,
    pub allocation: Vec<usize>,
    /// Decoded text of each row.
    pub texts: Vec<Vec<u8>>,
}

pub fn run(args: &SampleArgs) -> Result<Sampled> {
    let tree = TokenTree::load(&args.tree)
        .with_context(|| format!("loading tree {}", args.tree.display()))?;
    let tok = Tokenizer::for_tree(&args.tree, &tree)?;
    let (model, _) = checkpoint::load::<f32>(&args.ckpt)?;
    ensure!(
        model.config().branching == tree.branching()
            && model.config().node_vocab == tree.node_count(),
        "checkpoint {} (K={}, {} nodes) does not match tree {} (K={}, {} nodes)",
        args.ckpt.display(),
        model.config().branching,
        model.config().node_vocab,
        args.tree.display(),
        tree.branching(),
        tree.node_count()
    );
    let policy: AllocationPolicy = args.alloc.parse()?;
    let allocation = allocate_steps(args.steps, tree.tree_height(), &policy)?;
    let sched = NoiseSchedule::uniform(tree.tree_height())?;
    let cfg = GenerationConfig {
        allocation: allocation.clone(),
        seq_len: args.len.unwrap_or(model.config().seq_len),
        rows: args.rows,
        temperature: args.temp,
        seed: args.seed,
    };
    let generation = generate(&model, &tree, &sched, &cfg)?;
    if let Some(path) = &args.trace_out {
        let text: String = generation.trace.iter().map(|s| s.render() + "\n").collect();
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    let texts = generation
        .tokens
        .chunks(cfg.seq_len)
        .map(|row| tok.decode(row))
        .collect();
    Ok(Sampled {
        generation,
        allocation,
        texts,
    })
}
