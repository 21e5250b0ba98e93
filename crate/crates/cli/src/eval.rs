//! `tdlm eval`: negative ELBO per token with its level breakdown.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use clap::{Args, ValueEnum};
use tdlm_core::loss::ElboReport;
use tdlm_core::predictor::{ChildPredictor, UniformPredictor};
use tdlm_core::{LevelWeightConfig, NoiseSchedule, TokenTree};
use tdlm_model::checkpoint;
use tdlm_model::Denoiser;

use crate::train::{evaluate, load_data};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataPart {
    /// The held-out tail chunks.
    Val,
    /// Every chunk of the corpus.
    All,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "uniform")]
    pub ckpt: Option<PathBuf>,
    /// Score the uniform child predictor instead of a checkpoint.
    #[arg(long, conflicts_with = "ckpt")]
    pub uniform: bool,
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = DataPart::Val)]
    pub data: DataPart,
    #[arg(long, default_value_t = 0.05)]
    pub split: f64,
    /// Chunk length; defaults to the checkpoint's (256 for `--uniform`).
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Use at most this many chunks.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Corruption draws per chunk.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Level weights for the reported training objective: `none`,
    /// `linear:<γ>` or `exp:<γ>`. The ELBO is never weighted.
    #[arg(long, default_value = "none")]
    pub weights: String,
    #[arg(long, default_value_t = 10.0)]
    pub clip: f64,
}

impl EvalArgs {
    pub fn uniform(tree: PathBuf, corpus: PathBuf, seq_len: usize) -> Self {
        Self {
            ckpt: None,
            uniform: true,
            tree,
            corpus,
            data: DataPart::All,
            split: 0.05,
            seq_len: Some(seq_len),
            rows: None,
            samples: 8,
            seed: 0,
            weights: "none".into(),
            clip: 10.0,
        }
    }
}

fn load_model(path: &Path, tree: &TokenTree) -> Result<Denoiser<f32>> {
    let (model, _) = checkpoint::load::<f32>(path)?;
    let c = model.config();
    ensure!(
        c.branching == tree.branching(),
        "checkpoint {} has head width K={} but the tree has branching {}",
        path.display(),
        c.branching,
        tree.branching()
    );
    ensure!(
        c.node_vocab == tree.node_count(),
        "checkpoint {} embeds {} nodes but the tree has {}",
        path.display(),
        c.node_vocab,
        tree.node_count()
    );
    Ok(model)
}

pub fn run(args: &EvalArgs) -> Result<ElboReport> {
    let weights = LevelWeightConfig::parse(&args.weights)?;
    let tree = TokenTree::load(&args.tree)
        .with_context(|| format!("loading tree {}", args.tree.display()))?;
    let model = args
        .ckpt
        .as_deref()
        .map(|p| load_model(p, &tree))
        .transpose()?;
    let seq_len = match (args.seq_len, &model) {
        (Some(s), _) => s,
        (None, Some(m)) => m.config().seq_len,
        (None, None) => 256,
    };
    let (tree, tok, data) = load_data(&args.tree, &args.corpus, seq_len, args.split, args.seed)?;
    let mut seqs = match args.data {
        DataPart::Val => data.val,
        DataPart::All => {
            let mut all = data.train;
            all.extend(data.val);
            all
        }
    };
    if let Some(r) = args.rows {
        seqs.truncate(r * seq_len);
    }
    let sched = NoiseSchedule::uniform(tree.tree_height())?.with_clip_cap(args.clip)?;
    let uniform = UniformPredictor {
        branching: tree.branching(),
    };
    let predictor: &dyn ChildPredictor = match &model {
        Some(m) => m,
        None => &uniform,
    };
    evaluate(
        predictor,
        &tree,
        &sched,
        &seqs,
        seq_len,
        args.samples,
        tok.pad(),
        weights,
        args.seed,
    )
}

pub fn render(r: &ElboReport) -> String {
    format!(
        "{}std_err {:.6}\ntokens {}\ndraws {}\n",
        r.render(),
        r.std_err,
        r.tokens,
        r.draws
    )
}
